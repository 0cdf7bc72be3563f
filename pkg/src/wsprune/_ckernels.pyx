# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (im2col/col2im and depthwise correlation).

Loop order is fixed and single-threaded, so results are deterministic.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] x, real[:, ::1] cols, int kh, int kw, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = (x.shape[2] - kh) // stride + 1
    cdef Py_ssize_t wo = (x.shape[3] - kw) // stride + 1
    cdef Py_ssize_t b, oh, ow, ch, i, j, row, col, h0, w0
    for b in range(n):
        for oh in range(ho):
            h0 = oh * stride
            for ow in range(wo):
                w0 = ow * stride
                row = (b * ho + oh) * wo + ow
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[row, col] = x[b, ch, h0 + i, w0 + j]
                            col += 1


def im2col(xpad, int kh, int kw, int stride):
    xpad = np.ascontiguousarray(xpad)
    n, c, hp, wp = xpad.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n * ho * wo, c * kh * kw), dtype=xpad.dtype)
    _im2col(xpad, cols, kh, kw, stride)
    return cols


def _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out, int kh, int kw, int stride):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ho = (out.shape[2] - kh) // stride + 1
    cdef Py_ssize_t wo = (out.shape[3] - kw) // stride + 1
    cdef Py_ssize_t b, oh, ow, ch, i, j, row, col, h0, w0
    for b in range(n):
        for oh in range(ho):
            h0 = oh * stride
            for ow in range(wo):
                w0 = ow * stride
                row = (b * ho + oh) * wo + ow
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, ch, h0 + i, w0 + j] += cols[row, col]
                            col += 1


def col2im(cols, int n, int c, int hp, int wp, int kh, int kw, int stride):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride)
    return out


def _dw_forward(const real[:, :, :, ::1] x, const real[:, :, ::1] w,
                real[:, :, :, ::1] out, int stride):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t b, ch, oh, ow, i, j
    cdef real tap
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    tap = w[ch, i, j]
                    for oh in range(ho):
                        for ow in range(wo):
                            out[b, ch, oh, ow] += tap * x[b, ch, oh * stride + i, ow * stride + j]


def dw_forward(xpad, w, int stride):
    xpad = np.ascontiguousarray(xpad)
    w = np.ascontiguousarray(w, dtype=xpad.dtype)
    n, c, hp, wp = xpad.shape
    ho = (hp - w.shape[1]) // stride + 1
    wo = (wp - w.shape[2]) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=xpad.dtype)
    _dw_forward(xpad, w, out, stride)
    return out


def _dw_backward(const real[:, :, :, ::1] x, const real[:, :, ::1] w,
                 const real[:, :, :, ::1] dout, real[:, :, :, ::1] dx,
                 real[:, :, ::1] dw, int stride):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1]
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t b, ch, oh, ow, i, j, hh
    cdef real tap
    cdef double acc
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                tap = w[ch, i, j]
                acc = 0.0
                for b in range(n):
                    for oh in range(ho):
                        hh = oh * stride + i
                        for ow in range(wo):
                            acc += dout[b, ch, oh, ow] * x[b, ch, hh, ow * stride + j]
                            dx[b, ch, hh, ow * stride + j] += tap * dout[b, ch, oh, ow]
                dw[ch, i, j] = <real>acc


def dw_backward(xpad, w, dout, int stride):
    xpad = np.ascontiguousarray(xpad)
    w = np.ascontiguousarray(w, dtype=xpad.dtype)
    dout = np.ascontiguousarray(dout, dtype=xpad.dtype)
    dx = np.zeros_like(xpad)
    dw = np.zeros_like(w)
    _dw_backward(xpad, w, dout, dx, dw, stride)
    return dx, dw


def _maxpool_forward(const real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                     signed char[:, :, :, ::1] arg, int k):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t b, ch, oh, ow, i, j
    cdef real best, v
    cdef signed char where
    for b in range(n):
        for ch in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    best = x[b, ch, oh * k, ow * k]
                    where = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, oh * k + i, ow * k + j]
                            if v > best:
                                best = v
                                where = <signed char>(i * k + j)
                    out[b, ch, oh, ow] = best
                    arg[b, ch, oh, ow] = where


def maxpool_forward(x, int k):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // k, w // k), dtype=x.dtype)
    arg = np.empty((n, c, h // k, w // k), dtype=np.int8)
    _maxpool_forward(x, out, arg, k)
    return out, arg


def _maxpool_backward(const real[:, :, :, ::1] dout, const signed char[:, :, :, ::1] arg,
                      real[:, :, :, ::1] dx, int k):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1]
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    cdef Py_ssize_t b, ch, oh, ow, a
    for b in range(n):
        for ch in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    a = arg[b, ch, oh, ow]
                    dx[b, ch, oh * k + a // k, ow * k + a % k] = dout[b, ch, oh, ow]


def maxpool_backward(dout, arg, shape, int k):
    dout = np.ascontiguousarray(dout)
    dx = np.zeros(shape, dtype=dout.dtype)
    _maxpool_backward(dout, np.ascontiguousarray(arg), dx, k)
    return dx


def _bn_forward_train(const real[:, :, :, ::1] x, const real[:] gamma, const real[:] beta, double eps,
                      real[:, :, :, ::1] out, real[:, :, :, ::1] xhat,
                      double[::1] mean, double[::1] var, real[::1] inv_std):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, i, j
    cdef double s, ss, mu, d, count = n * h * w
    cdef real istd, g, bt, xh
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    s += x[b, ch, i, j]
        mu = s / count
        ss = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    d = x[b, ch, i, j] - mu
                    ss += d * d
        mean[ch] = mu
        var[ch] = ss / count
        istd = <real>(1.0 / (ss / count + eps) ** 0.5)
        inv_std[ch] = istd
        g = gamma[ch]
        bt = beta[ch]
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    xh = (x[b, ch, i, j] - <real>mu) * istd
                    xhat[b, ch, i, j] = xh
                    out[b, ch, i, j] = xh * g + bt


def bn_forward_train(x, gamma, beta, double eps):
    x = np.ascontiguousarray(x)
    c = x.shape[1]
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    mean = np.empty(c, dtype=np.float64)
    var = np.empty(c, dtype=np.float64)
    inv_std = np.empty(c, dtype=x.dtype)
    _bn_forward_train(x, np.asarray(gamma, dtype=x.dtype), np.asarray(beta, dtype=x.dtype), eps,
                      out, xhat, mean, var, inv_std)
    return out, xhat, mean, var, inv_std


def _bn_backward_train(const real[:, :, :, ::1] dout, const real[:, :, :, ::1] xhat,
                       const real[:] gamma, const real[:] inv_std,
                       real[:, :, :, ::1] dx, real[::1] dgamma, real[::1] dbeta):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], h = dout.shape[2], w = dout.shape[3]
    cdef Py_ssize_t b, ch, i, j
    cdef double sd, sdx, count = n * h * w
    cdef real k1, k2, scale
    for ch in range(c):
        sd = 0.0
        sdx = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    sd += dout[b, ch, i, j]
                    sdx += dout[b, ch, i, j] * xhat[b, ch, i, j]
        dgamma[ch] = <real>sdx
        dbeta[ch] = <real>sd
        scale = gamma[ch] * inv_std[ch]
        k1 = <real>(sd / count)
        k2 = <real>(sdx / count)
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    dx[b, ch, i, j] = scale * (dout[b, ch, i, j] - k1 - xhat[b, ch, i, j] * k2)


def bn_backward_train(dout, xhat, gamma, inv_std):
    dout = np.ascontiguousarray(dout)
    c = dout.shape[1]
    dx = np.empty_like(dout)
    dgamma = np.empty(c, dtype=dout.dtype)
    dbeta = np.empty(c, dtype=dout.dtype)
    _bn_backward_train(dout, np.ascontiguousarray(xhat), np.asarray(gamma, dtype=dout.dtype),
                       np.asarray(inv_std, dtype=dout.dtype), dx, dgamma, dbeta)
    return dx, dgamma, dbeta
