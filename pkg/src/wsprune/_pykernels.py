"""Pure-numpy versions of the convolution kernels.

Same signatures and layouts as the compiled ``_ckernels`` module; used when
the extension is unavailable or ``WSPRUNE_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xpad, kh, kw, stride):
    """Unfold ``(N, C, Hp, Wp)`` into rows of ``(N*Ho*Wo, C*kh*kw)``."""
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add rows back onto the padded grid."""
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patch
    return out


def dw_forward(xpad, w, stride):
    """Depthwise correlation; ``w`` has shape ``(C, kh, kw)``."""
    n, c, hp, wp = xpad.shape
    kh, kw = w.shape[1], w.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = w[:, i, j].reshape(1, c, 1, 1)
            out += tap * xpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return out


def dw_backward(xpad, w, dout, stride):
    """Gradients of :func:`dw_forward` w.r.t. the padded input and the taps."""
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros_like(xpad)
    dw = np.zeros_like(w)
    c = w.shape[0]
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            dw[:, i, j] = np.einsum("nchw,nchw->c", xpad[sl], dout)
            dx[sl] += w[:, i, j].reshape(1, c, 1, 1) * dout
    return dx, dw


def maxpool_forward(x, k):
    """Non-overlapping ``k x k`` max pooling; also returns the in-window argmax (first max wins)."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


def maxpool_backward(dout, arg, shape, k):
    n, c, h, w = shape
    ho, wo = dout.shape[2], dout.shape[3]
    win = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
    np.put_along_axis(win, arg.astype(np.intp)[..., None], dout[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :ho * k, :wo * k] = win
    return dx


def bn_forward_train(x, gamma, beta, eps):
    """Batch-statistics normalisation; returns ``(out, xhat, mean, var, inv_std)``.

    ``var`` is the biased (population) batch variance.
    """
    shape = (1, -1, 1, 1)
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, xhat, mean, var, inv_std


def bn_backward_train(dout, xhat, gamma, inv_std):
    shape = (1, -1, 1, 1)
    count = dout.size // dout.shape[1]
    dbeta = dout.sum(axis=(0, 2, 3), dtype=np.float64)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    scale = (gamma * inv_std).reshape(shape)
    dx = scale * (dout - (dbeta / count).astype(dout.dtype).reshape(shape)
                  - xhat * (dgamma / count).astype(dout.dtype).reshape(shape))
    return dx, dgamma.astype(dout.dtype), dbeta.astype(dout.dtype)
