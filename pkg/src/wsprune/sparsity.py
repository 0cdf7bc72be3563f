"""Scaling-factor snapshots and the Weight Skewness sparsity metric."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DegenerateDistributionError(ValueError):
    """All scaling factors are equal, so skewness is undefined."""

    code = "degenerate_distribution"


@dataclass
class GammaSnapshot:
    """Flattened BN scales with ``(layer_index, channel_index)`` provenance.

    ``layer_index`` is the BN layer's position in the network and
    ``channel_index`` the channel's id in the originally built layer.
    """

    values: np.ndarray
    provenance: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.provenance = [tuple(int(v) for v in p) for p in self.provenance]
        if len(self.values) != len(self.provenance) or len(self.values) == 0:
            raise ValueError("values and provenance must be non-empty and of equal length")
        if len(set(self.provenance)) != len(self.provenance):
            raise ValueError("provenance entries must be unique")

    @property
    def total_count(self):
        return len(self.values)

    def __len__(self):
        return len(self.values)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray


@dataclass
class SparsityReport:
    ws: float
    gamma_mean: float
    gamma_std: float
    near_zero_fraction: float
    histogram: Histogram
    total_count: int

    def to_dict(self):
        return {
            "ws": self.ws,
            "gamma_mean": self.gamma_mean,
            "gamma_std": self.gamma_std,
            "near_zero_fraction": self.near_zero_fraction,
            "total_count": self.total_count,
            "histogram": {"edges": self.histogram.edges.tolist(), "counts": self.histogram.counts.tolist()},
        }


def collect_gammas(net):
    """Every BN scale exactly once, ordered by (layer, channel)."""
    values, prov = [], []
    for i, layer in net.bn_layers():
        gamma = layer.params["gamma"]
        values.append(np.asarray(gamma, dtype=np.float64))
        prov += [(i, int(c)) for c in layer.channel_ids]
    if not values:
        raise ValueError("network has no BN layers")
    return GammaSnapshot(np.concatenate(values), prov)


def _values(snap):
    return snap.values if isinstance(snap, GammaSnapshot) else np.asarray(snap, dtype=np.float64)


def weight_skewness(snap):
    """sum((g - mean)^3) / ((n - 1) * sigma^3) with sigma the population std.

    Note the mixed normalisation: the textbook sample skewness would use n in
    the denominator (or n - 1 in sigma as well).
    """
    g = _values(snap)
    n = g.size
    if n < 2:
        raise ValueError("weight skewness needs at least 2 values")
    centered = g - g.mean()
    sigma = np.sqrt(np.mean(centered ** 2))
    if sigma == 0 or sigma < 1e-300:
        raise DegenerateDistributionError("all scaling factors are equal (sigma = 0)")
    # standardise before cubing so tiny/huge scales do not over- or underflow
    z = centered / sigma
    return float(np.sum(z ** 3) / (n - 1))


def gamma_histogram(snap, num_bins=20):
    """Equal-width histogram over [min, max]; counts sum to the snapshot length."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    counts, edges = np.histogram(_values(snap), bins=num_bins)
    return Histogram(edges, counts)


def sparsity_report(snap, num_bins=20, zero_threshold=1e-3):
    g = _values(snap)
    return SparsityReport(
        ws=weight_skewness(g),
        gamma_mean=float(g.mean()),
        gamma_std=float(g.std()),
        near_zero_fraction=float(np.mean(np.abs(g) < zero_threshold)),
        histogram=gamma_histogram(g, num_bins),
        total_count=int(g.size),
    )


def write_snapshot_csv(snap, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer_index", "channel_index", "gamma"])
        for (layer, channel), value in zip(snap.provenance, snap.values):
            writer.writerow([layer, channel, repr(float(value))])


def read_snapshot_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return GammaSnapshot([float(r["gamma"]) for r in rows],
                         [(int(r["layer_index"]), int(r["channel_index"])) for r in rows])
