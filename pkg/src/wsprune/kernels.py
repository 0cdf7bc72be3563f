"""Backend selection for the convolution hot loops.

The compiled extension is preferred; set ``WSPRUNE_PURE_PYTHON=1`` before
import (or call :func:`use_backend`) to force the numpy fallback.
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"numpy": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

BACKEND = "cython" if _ckernels is not None and os.environ.get("WSPRUNE_PURE_PYTHON") != "1" else "numpy"
_impl = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Switch the active kernel backend; returns the previous name."""
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable (have {available_backends()})")
    previous = BACKEND
    BACKEND, _impl = name, _BACKENDS[name]
    return previous


def im2col(xpad, kh, kw, stride):
    return _impl.im2col(xpad, kh, kw, stride)


def col2im(cols, n, c, hp, wp, kh, kw, stride):
    return _impl.col2im(cols, n, c, hp, wp, kh, kw, stride)


def dw_forward(xpad, w, stride):
    return _impl.dw_forward(xpad, w, stride)


def dw_backward(xpad, w, dout, stride):
    return _impl.dw_backward(xpad, w, dout, stride)


def maxpool_forward(x, k):
    return _impl.maxpool_forward(x, k)


def maxpool_backward(dout, arg, shape, k):
    return _impl.maxpool_backward(dout, arg, shape, k)


def bn_forward_train(x, gamma, beta, eps):
    return _impl.bn_forward_train(x, gamma, beta, eps)


def bn_backward_train(dout, xhat, gamma, inv_std):
    return _impl.bn_backward_train(dout, xhat, gamma, inv_std)
