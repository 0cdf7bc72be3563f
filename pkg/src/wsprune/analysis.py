"""Knee detection on pruning curves and the WS/PK correlation statistics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    """A statistic is undefined because an input has zero variance."""

    code = "degenerate_input"


@dataclass
class Curve2D:
    x: np.ndarray
    y: np.ndarray
    direction: str = "increasing"
    curvature: str = "concave"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-D arrays of equal length")
        if self.direction not in ("increasing", "decreasing"):
            raise ValueError(f"direction must be increasing or decreasing, got {self.direction!r}")
        if self.curvature not in ("concave", "convex"):
            raise ValueError(f"curvature must be concave or convex, got {self.curvature!r}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("curve points must be finite")
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("x must be strictly increasing")


@dataclass
class KneeResult:
    found: bool
    knee_x: float | None
    knee_y: float | None
    knee_index: int | None
    difference_curve: np.ndarray
    local_maxima: list
    psi: float

    def to_dict(self):
        out = asdict(self)
        out["difference_curve"] = self.difference_curve.tolist()
        return out


def _minmax(v):
    span = v.max() - v.min()
    return (v - v.min()) / span if span > 0 else np.zeros_like(v)


def moving_average(y, window=3):
    """Centered moving average; the ends use the available neighbours."""
    half = window // 2
    out = np.empty_like(y)
    for i in range(len(y)):
        out[i] = y[max(0, i - half):i + half + 1].mean()
    return out


def kneedle(curve, psi=1.0, strict_threshold=False, smooth=False, select="first"):
    """Kneedle knee detection.

    The curve is min-max normalised, flipped into concave-increasing form,
    and the difference ``y - x`` is scanned for local maxima. A maximum
    qualifies once the difference falls below ``y_lmx - psi * mean_spacing``
    before the next maximum. ``select="first"`` returns the first qualifying
    maximum in canonical order; ``select="prominent"`` the qualifying maximum
    with the largest difference value.

    ``strict_threshold`` replaces the mean spacing by the literal
    ``sum(x[i+1] - x[n]) / (n - 1)`` form (kept for comparison only; it is
    never positive, so every local maximum qualifies immediately).
    """
    if not isinstance(curve, Curve2D):
        curve = Curve2D(*curve)
    if select not in ("first", "prominent"):
        raise ValueError(f"select must be 'first' or 'prominent', got {select!r}")
    n = len(curve.x)
    if n < 3:
        raise ValueError("knee detection needs at least 3 points")
    y_raw = moving_average(curve.y) if smooth else curve.y
    xn, yn = _minmax(curve.x), _minmax(y_raw)
    flip_x = (curve.direction == "decreasing") == (curve.curvature == "concave")
    flip_y = curve.curvature == "convex"
    if flip_y:
        yn = 1.0 - yn
    if flip_x:
        # mirror and reverse so the canonical x stays increasing
        xc, yc = (1.0 - xn)[::-1], yn[::-1]
    else:
        xc, yc = xn, yn
    yd = yc - xc
    if strict_threshold:
        spacing = np.sum(xc[1:] - xc[-1]) / (n - 1)
    else:
        spacing = np.sum(np.diff(xc)) / (n - 1)
    maxima = [i for i in range(1, n - 1) if yd[i - 1] < yd[i] and yd[i + 1] < yd[i]]
    knee = None
    for k, lm in enumerate(maxima):
        threshold = yd[lm] - psi * spacing
        stop = maxima[k + 1] if k + 1 < len(maxima) else n
        if any(yd[j] < threshold for j in range(lm + 1, stop)):
            if knee is None or yd[lm] > yd[knee]:
                knee = lm
            if select == "first":
                break

    def to_original(i):
        return n - 1 - i if flip_x else i

    diff = np.column_stack([xc, yd])
    if flip_x:
        diff = diff[::-1].copy()
    local = sorted(to_original(i) for i in maxima)
    if knee is None:
        return KneeResult(False, None, None, None, diff, local, psi)
    idx = to_original(knee)
    return KneeResult(True, float(curve.x[idx]), float(curve.y[idx]), idx, diff, local, psi)


@dataclass
class PruneKnee:
    pk: float
    knee_found: bool
    accuracy_at_pk: float
    accuracy_loss_at_pk: float
    knee: KneeResult | None = field(default=None, repr=False)


def prune_knee(curve, psi=1.0, fallback_loss=0.02, select="prominent", **kneedle_kw):
    """Prune Knee: knee of accuracy vs. parameter-prune fraction.

    Sweeps that run down to the per-layer channel floor end on a chance-level
    plateau whose corner is also a knee, so by default the most prominent
    qualifying knee is taken rather than the first one.

    Without a knee, falls back to the largest parameter-prune fraction whose
    accuracy loss is at most ``fallback_loss`` (``knee_found`` is False).
    """
    if len(curve.points) < 3:
        raise ValueError("prune knee needs a curve with at least 3 points")
    x = curve.column("param_prune_fraction")
    acc = curve.column("accuracy")
    loss = curve.column("accuracy_loss")
    # parameter fractions can repeat if a step removes nothing countable; keep the first
    keep = np.concatenate([[True], np.diff(x) > 0])
    xs, accs, losses = x[keep], acc[keep], loss[keep]
    result = None
    if len(xs) >= 3:
        result = kneedle(Curve2D(xs, accs, "decreasing", "concave"), psi, select=select, **kneedle_kw)
    if result is not None and result.found:
        i = result.knee_index
        return PruneKnee(float(xs[i]), True, float(accs[i]), float(losses[i]), result)
    ok = np.flatnonzero(losses <= fallback_loss)
    i = int(ok.max()) if ok.size else 0
    return PruneKnee(float(xs[i]), False, float(accs[i]), float(losses[i]), result)


def _pair(ws, pk):
    ws = np.asarray(ws, dtype=np.float64)
    pk = np.asarray(pk, dtype=np.float64)
    if ws.shape != pk.shape or ws.ndim != 1 or ws.size < 2:
        raise ValueError("ws and pk must be 1-D sequences of equal length >= 2")
    return ws, pk


def linear_regression(ws, pk):
    """Least-squares slope and intercept of ``pk = m * ws + b``."""
    ws, pk = _pair(ws, pk)
    dw = ws - ws.mean()
    denom = np.sum(dw * dw)
    if denom == 0:
        raise DegenerateInputError("ws is constant; the regression slope is undefined")
    m = float(np.sum(dw * (pk - pk.mean())) / denom)
    b = float(pk.mean() - m * ws.mean())
    return m, b


def pearson(ws, pk):
    ws, pk = _pair(ws, pk)
    dw, dp = ws - ws.mean(), pk - pk.mean()
    sw, sp = math.sqrt(np.sum(dw * dw)), math.sqrt(np.sum(dp * dp))
    if sw == 0 or sp == 0:
        raise DegenerateInputError("pearson correlation undefined for a constant sequence")
    r = float(np.sum(dw * dp) / (sw * sp))
    return max(-1.0, min(1.0, r))


@dataclass
class CorrelationReport:
    slope_m: float
    intercept_b: float
    pearson_r: float
    n: int
    ws_mean: float
    pk_mean: float

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def correlate(ws, pk):
    ws, pk = _pair(ws, pk)
    m, b = linear_regression(ws, pk)
    return CorrelationReport(m, b, pearson(ws, pk), int(ws.size), float(ws.mean()), float(pk.mean()))
