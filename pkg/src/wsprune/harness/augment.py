"""Mixup and SpecAugment-style masking."""
from __future__ import annotations

import numpy as np


def mixup(x, y, alpha=0.4, rng=None, mu=None, partner=None):
    """Mix each sample with a shuffled partner: ``mu * a + (1 - mu) * b``.

    ``y`` holds class-probability rows, which are mixed the same way.
    ``mu`` defaults to a Beta(alpha, alpha) draw; ``partner`` to a random
    permutation. Returns ``(x_mixed, y_mixed, mu)``.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least 2")
    rng = np.random.default_rng() if rng is None else rng
    if mu is None:
        mu = float(rng.beta(alpha, alpha))
    if partner is None:
        partner = rng.permutation(x.shape[0])
    xm = (mu * x + (1.0 - mu) * x[partner]).astype(x.dtype, copy=False)
    ym = (mu * y + (1.0 - mu) * y[partner]).astype(y.dtype, copy=False)
    return xm, ym, mu


def specaugment(feature, freq_mask=4, time_mask=40, rng=None, widths=None):
    """Zero one frequency band and one time span of a ``(..., F, T)`` feature.

    Widths are uniform in ``[0, freq_mask]`` and ``[0, time_mask]`` unless
    forced through ``widths=(f, t)``. Returns a new array.
    """
    feature = np.asarray(feature)
    n_freq, n_time = feature.shape[-2], feature.shape[-1]
    if freq_mask > n_freq or time_mask > n_time:
        raise ValueError(f"mask sizes ({freq_mask}, {time_mask}) exceed feature axes ({n_freq}, {n_time})")
    if freq_mask < 0 or time_mask < 0:
        raise ValueError("mask sizes must be nonnegative")
    rng = np.random.default_rng() if rng is None else rng
    if widths is None:
        fw = int(rng.integers(0, freq_mask + 1))
        tw = int(rng.integers(0, time_mask + 1))
    else:
        fw, tw = widths
        if not (0 <= fw <= n_freq and 0 <= tw <= n_time):
            raise ValueError("forced mask widths exceed the feature axes")
    f0 = int(rng.integers(0, n_freq - fw + 1))
    t0 = int(rng.integers(0, n_time - tw + 1))
    out = feature.copy()
    out[..., f0:f0 + fw, :] = 0
    out[..., :, t0:t0 + tw] = 0
    return out


def make_augmenter(mixup_alpha=0.4, freq_mask=4, time_mask=40):
    """Batch hook for :func:`wsprune.nncore.fit`: per-sample masking, then Mixup.

    A ``mixup_alpha`` of 0 or None disables Mixup; mask sizes are clipped to
    the feature axes.
    """

    def augment(x, y, rng):
        if freq_mask or time_mask:
            fm = min(freq_mask, x.shape[-2])
            tm = min(time_mask, x.shape[-1])
            x = np.stack([specaugment(s, fm, tm, rng) for s in x])
        if mixup_alpha:
            x, y, _ = mixup(x, y, mixup_alpha, rng)
        return x, y

    return augment
