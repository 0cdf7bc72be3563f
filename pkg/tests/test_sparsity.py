import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from wsprune.sparsity import (DegenerateDistributionError, GammaSnapshot, collect_gammas, gamma_histogram,
                              read_snapshot_csv, sparsity_report, weight_skewness, write_snapshot_csv)

from conftest import tiny_net


def ws_direct(g):
    """Loop form: mean, population variance, then the third-moment sum."""
    g = [float(v) for v in g]
    n = len(g)
    mean = math.fsum(g) / n
    sigma = math.sqrt(math.fsum((v - mean) ** 2 for v in g) / n)
    return math.fsum((v - mean) ** 3 for v in g) / ((n - 1) * sigma ** 3)


def test_matches_direct_loop(rng):
    for _ in range(50):
        g = rng.gamma(0.5, 0.3, size=int(rng.integers(2, 500)))
        assert weight_skewness(g) == pytest.approx(ws_direct(g), rel=1e-10)


def test_relation_to_scipy_biased_skew(rng):
    g = rng.exponential(size=300)
    n = g.size
    assert weight_skewness(g) == pytest.approx(stats.skew(g, bias=True) * n / (n - 1), rel=1e-10)


def test_two_values_are_symmetric():
    assert weight_skewness([0.1, 0.9]) == pytest.approx(0.0, abs=1e-12)


def test_right_tail_is_positive():
    assert weight_skewness([0.0] * 9 + [1.0]) > 0
    assert weight_skewness([1.0] * 9 + [0.0]) < 0


def test_constant_is_degenerate():
    with pytest.raises(DegenerateDistributionError):
        weight_skewness(np.full(10, 0.5))
    with pytest.raises(ValueError):
        weight_skewness([1.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=60),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_affine_invariance_and_odd_symmetry(values, a, c):
    g = np.asarray(values)
    if np.std(g) < 1e-3:
        return
    ws = weight_skewness(g)
    assert weight_skewness(a * g + c) == pytest.approx(ws, abs=1e-8)
    assert weight_skewness(-g) == pytest.approx(-ws, abs=1e-9)


def test_snapshot_provenance_and_csv(tmp_path):
    net = tiny_net()
    snap = collect_gammas(net)
    assert snap.total_count == sum(layer.channels for _, layer in net.bn_layers())
    assert len(set(snap.provenance)) == len(snap.provenance)
    assert np.all(snap.values == 0.5)
    path = tmp_path / "g.csv"
    write_snapshot_csv(snap, path)
    back = read_snapshot_csv(path)
    assert back.provenance == snap.provenance
    assert np.array_equal(back.values, snap.values)


def test_snapshot_validation():
    with pytest.raises(ValueError):
        GammaSnapshot([1.0, 2.0], [(0, 0), (0, 0)])
    with pytest.raises(ValueError):
        GammaSnapshot([], [])


def test_report_fields(rng):
    g = np.concatenate([np.zeros(30), rng.uniform(0.2, 1.0, 70)])
    rep = sparsity_report(g, num_bins=10)
    assert rep.near_zero_fraction == pytest.approx(0.3)
    assert rep.histogram.counts.sum() == 100
    assert len(rep.histogram.edges) == 11
    assert rep.ws == pytest.approx(ws_direct(g), rel=1e-10)
    assert set(rep.to_dict()) >= {"ws", "gamma_mean", "gamma_std", "near_zero_fraction", "histogram"}
    with pytest.raises(ValueError):
        gamma_histogram(g, 0)
