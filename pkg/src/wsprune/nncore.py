"""Minimal CNN engine with hand-written backward passes.

Activations use N, C, H, W layout and conv kernels use (out, in, kh, kw).
Everything is float32 by default; :meth:`NetworkGraph.astype` produces a
float64 copy for gradient checking.

Reductions run single-threaded through numpy/BLAS and the kernels in
:mod:`wsprune.kernels`; with a fixed BLAS thread count results are
reproducible bit for bit.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer_index, message):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.buffers = {}

    def forward(self, xs, train, update_stats=True):
        raise NotImplementedError

    def backward(self, dout, cache, need_dx=True):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Conv2d(Layer):
    """Bias-free 2-D convolution. ``groups`` is 1 (standard) or ``cin`` (depthwise)."""

    kind = "conv"

    def __init__(self, name, cin, cout, kernel, stride=1, padding=0, groups=1, weight=None):
        super().__init__(name)
        if groups not in (1, cin):
            raise ValueError(f"{name}: only groups=1 or groups=cin are supported")
        if groups > 1 and cout != cin:
            raise ValueError(f"{name}: depthwise conv requires cout == cin")
        self.cin, self.cout = cin, cout
        self.kernel, self.stride, self.padding, self.groups = kernel, stride, padding, groups
        if weight is None:
            weight = np.zeros((cout, cin // groups, kernel, kernel), dtype=np.float32)
        self.params["weight"] = weight

    @property
    def depthwise(self):
        return self.groups > 1

    def forward(self, xs, train, update_stats=True):
        (x,) = xs
        w = self.params["weight"]
        if x.shape[1] != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got {x.shape[1]}")
        p, k, s = self.padding, self.kernel, self.stride
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        if xpad.shape[2] < k or xpad.shape[3] < k:
            raise ValueError(f"spatial size {x.shape[2:]} too small for kernel {k}")
        if self.depthwise:
            out = kernels.dw_forward(xpad, w[:, 0], s)
            return out, (xpad, x.shape)
        n = x.shape[0]
        cols = kernels.im2col(xpad, k, k, s)
        ho = (xpad.shape[2] - k) // s + 1
        wo = (xpad.shape[3] - k) // s + 1
        out = cols @ w.reshape(self.cout, -1).T
        out = np.ascontiguousarray(out.reshape(n, ho, wo, self.cout).transpose(0, 3, 1, 2))
        return out, (cols, xpad.shape, x.shape)

    def backward(self, dout, cache, need_dx=True):
        w = self.params["weight"]
        p, k, s = self.padding, self.kernel, self.stride
        if self.depthwise:
            xpad, xshape = cache
            dxpad, dw = kernels.dw_backward(xpad, w[:, 0], dout, s)
            dw = dw[:, None]
        else:
            cols, pshape, xshape = cache
            d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.cout)
            dw = (d2.T @ cols).reshape(w.shape)
            if not need_dx:
                return [None], {"weight": dw}
            dcols = d2 @ w.reshape(self.cout, -1)
            dxpad = kernels.col2im(dcols, *pshape, k, k, s)
        dx = dxpad[:, :, p:p + xshape[2], p:p + xshape[3]] if p else dxpad
        return [dx], {"weight": dw}


class BatchNorm2d(Layer):
    """Per-channel batch normalization with learnable scale ``gamma`` and shift ``beta``.

    ``channel_ids`` records which channels of the originally built layer are
    still present, so provenance survives structural pruning.
    """

    kind = "bn"

    def __init__(self, name, channels, eps=1e-5, momentum=0.1, gamma_init=0.5, dtype=np.float32):
        super().__init__(name)
        if eps <= 0 or not 0 < momentum < 1:
            raise ValueError("eps must be > 0 and momentum in (0, 1)")
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.full(channels, gamma_init, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.channel_ids = np.arange(channels)
        self.prunable = False

    @property
    def channels(self):
        return self.params["gamma"].shape[0]

    def forward(self, xs, train, update_stats=True):
        (x,) = xs
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        shape = (1, -1, 1, 1)
        if train:
            out, xhat, mean, var, inv_std = kernels.bn_forward_train(x, gamma, beta, self.eps)
            if update_stats:
                count = x.size // x.shape[1]
                m = self.momentum
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                rm[...] = (1 - m) * rm + m * mean
                rv[...] = (1 - m) * rv + m * var * (count / max(count - 1, 1))
            return out, (xhat, inv_std, train)
        mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        out = xhat * gamma.reshape(shape) + beta.reshape(shape)
        return out, (xhat, inv_std, train)

    def backward(self, dout, cache, need_dx=True):
        xhat, inv_std, train = cache
        gamma = self.params["gamma"]
        if train:
            dx, dgamma, dbeta = kernels.bn_backward_train(dout, xhat, gamma, inv_std)
            return [dx], {"gamma": dgamma, "beta": dbeta}
        dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        dbeta = dout.sum(axis=(0, 2, 3))
        dx = dout * (gamma * inv_std).reshape(1, -1, 1, 1)
        return [dx], {"gamma": dgamma, "beta": dbeta}


class ReLU(Layer):
    kind = "relu"

    def forward(self, xs, train, update_stats=True):
        (x,) = xs
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache, need_dx=True):
        return [dout * cache], {}


class MaxPool2d(Layer):
    """Non-overlapping max pooling (floor mode); ties route to the first maximum."""

    kind = "maxpool"

    def __init__(self, name, size=2):
        super().__init__(name)
        self.size = size

    def forward(self, xs, train, update_stats=True):
        (x,) = xs
        k = self.size
        if x.shape[2] < k or x.shape[3] < k:
            raise ValueError(f"spatial size {x.shape[2:]} too small for pooling {k}")
        out, arg = kernels.maxpool_forward(x, k)
        return out, (arg, x.shape)

    def backward(self, dout, cache, need_dx=True):
        arg, shape = cache
        return [kernels.maxpool_backward(dout, arg, shape, self.size)], {}


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, xs, train, update_stats=True):
        (x,) = xs
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dout, cache, need_dx=True):
        n, c, h, w = cache
        dx = np.broadcast_to((dout / (h * w))[:, :, None, None], cache)
        return [np.ascontiguousarray(dx)], {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, fin, fout, weight=None, bias=None):
        super().__init__(name)
        self.fin, self.fout = fin, fout
        self.params["weight"] = np.zeros((fout, fin), np.float32) if weight is None else weight
        self.params["bias"] = np.zeros(fout, np.float32) if bias is None else bias

    def forward(self, xs, train, update_stats=True):
        (x,) = xs
        if x.ndim != 2 or x.shape[1] != self.fin:
            raise ValueError(f"expected (N, {self.fin}) input, got {x.shape}")
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, dout, cache, need_dx=True):
        x = cache
        grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        return [dout @ self.params["weight"]], grads


class Add(Layer):
    kind = "add"

    def forward(self, xs, train, update_stats=True):
        a, b = xs
        if a.shape != b.shape:
            raise ValueError(f"residual shapes differ: {a.shape} vs {b.shape}")
        return a + b, None

    def backward(self, dout, cache, need_dx=True):
        return [dout, dout], {}


# --------------------------------------------------------------------------
# network graph
# --------------------------------------------------------------------------


@dataclass
class Tape:
    caches: list
    logits: np.ndarray
    train: bool
    input_grad: np.ndarray | None = None


class NetworkGraph:
    """Ordered layer DAG. ``inputs[i]`` lists the producers of layer ``i`` (-1 = network input).

    The last layer produces the logits.
    """

    def __init__(self, layers, inputs, input_shape, num_classes, arch=None):
        if len(layers) != len(inputs):
            raise ValueError("layers and inputs must have equal length")
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for i, srcs in enumerate(inputs):
            if any(j >= i or j < -1 for j in srcs):
                raise ValueError(f"layer {i} reads from a later layer")
        self.layers = list(layers)
        self.inputs = [tuple(s) for s in inputs]
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.arch = arch
        self.tape = None

    @property
    def dtype(self):
        for _, p in self.named_parameters():
            return p.dtype
        return np.dtype(np.float32)

    def named_parameters(self):
        for layer in self.layers:
            for key, value in layer.params.items():
                yield f"{layer.name}.{key}", value

    def named_buffers(self):
        for layer in self.layers:
            for key, value in layer.buffers.items():
                yield f"{layer.name}.{key}", value

    def parameters(self):
        return dict(self.named_parameters())

    def bn_layers(self):
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.kind == "bn"]

    def consumers(self, index):
        return [i for i, srcs in enumerate(self.inputs) if index in srcs]

    def clone(self):
        twin = copy.deepcopy(self)
        twin.tape = None
        return twin

    def astype(self, dtype):
        twin = self.clone()
        for layer in twin.layers:
            for store in (layer.params, layer.buffers):
                for key in store:
                    store[key] = store[key].astype(dtype)
        return twin

    def __repr__(self):
        return f"NetworkGraph({len(self.layers)} layers, input={self.input_shape}, classes={self.num_classes})"


def forward(net, batch, mode="eval", cache=False, update_stats=True):
    """Run the network and return logits of shape (N, num_classes).

    In ``train`` mode BN uses batch statistics (and updates its running
    statistics unless ``update_stats`` is False). With ``cache=True`` the
    per-layer intermediates are kept on ``net.tape`` for :func:`backward`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != net.input_shape:
        raise ShapeError(0, f"batch shape {batch.shape} does not match input (N, {net.input_shape})")
    train = mode == "train"
    if train and batch.shape[0] < 2:
        raise ValueError("train-mode forward needs a batch of at least 2 samples")
    batch = batch.astype(net.dtype, copy=False)
    outs = [None] * len(net.layers)
    caches = [None] * len(net.layers) if cache else None
    for i, (layer, srcs) in enumerate(zip(net.layers, net.inputs)):
        xs = [batch if j == -1 else outs[j] for j in srcs]
        try:
            out, c = layer.forward(xs, train, update_stats)
        except ValueError as err:
            raise ShapeError(i, str(err)) from None
        outs[i] = out
        if cache:
            caches[i] = c
    logits = outs[-1]
    if logits.ndim != 2:
        raise ShapeError(len(net.layers) - 1, f"final layer output has shape {logits.shape}")
    net.tape = Tape(caches, logits, train) if cache else None
    return logits


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def one_hot(labels, num_classes, dtype=np.float32):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def _as_targets(labels, logits):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = one_hot(labels, logits.shape[1], logits.dtype)
    if labels.shape != logits.shape:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    sums = labels.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"label row {bad} sums to {sums[bad]!r}, expected 1")
    return labels


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy against (soft) class-probability labels."""
    labels = _as_targets(labels, logits)
    return float(-(labels * log_softmax(logits)).sum(axis=1, dtype=np.float64).mean())


def l1_penalty(net):
    return float(sum(np.abs(layer.params["gamma"]).sum(dtype=np.float64) for _, layer in net.bn_layers()))


def loss_with_penalty(logits, labels, net, lam):
    """Cross-entropy plus ``lam`` times the L1 norm of every BN scale."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    ce = cross_entropy(logits, labels)
    return ce + lam * l1_penalty(net) if lam else ce


def backward(net, labels, lam=0.0, input_grad=False):
    """Gradients of :func:`loss_with_penalty` for every trainable parameter.

    Requires a preceding ``forward(..., cache=True)``. The L1 term adds
    ``lam * sign(gamma)`` with ``sign(0) == 0``. With ``input_grad`` the
    gradient w.r.t. the batch is stored on ``net.tape.input_grad``.
    """
    tape = net.tape
    if tape is None or tape.caches is None:
        raise RuntimeError("backward needs a cached forward pass (forward(..., cache=True))")
    logits = tape.logits
    targets = _as_targets(labels, logits).astype(logits.dtype, copy=False)
    n = logits.shape[0]
    douts = [None] * len(net.layers)
    douts[-1] = (softmax(logits) - targets) / n
    d_input = None
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        d = douts[i]
        layer = net.layers[i]
        if d is None:
            for key, value in layer.params.items():
                grads[f"{layer.name}.{key}"] = np.zeros_like(value)
            continue
        need_dx = input_grad or any(j != -1 for j in net.inputs[i])
        dxs, g = layer.backward(d, tape.caches[i], need_dx)
        for key, value in g.items():
            grads[f"{layer.name}.{key}"] = value
        for j, dx in zip(net.inputs[i], dxs):
            if dx is None:
                continue
            if j == -1:
                d_input = dx if d_input is None else d_input + dx
            else:
                douts[j] = dx if douts[j] is None else douts[j] + dx
    if lam:
        for _, layer in net.bn_layers():
            key = f"{layer.name}.gamma"
            grads[key] = grads[key] + (lam * np.sign(layer.params["gamma"])).astype(grads[key].dtype)
    tape.input_grad = d_input
    return grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class TrainingConfig:
    """Sparse-training hyperparameters.

    ``momentum`` is an optional heavy-ball term applied on top of the
    adaptive-moment step (0 disables it); ``beta1`` is Adam's own first
    moment decay.
    """

    lam: float = 0.0
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    momentum: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("weight_decay must be >= 0 and momentum in [0, 1)")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    buf: dict = field(default_factory=dict)
    step: int = 0


def _decays(name):
    return not (name.endswith(".gamma") or name.endswith(".beta"))


def optimizer_step(params, grads, state, cfg, lr=None):
    """One bias-corrected Adam step with decoupled weight decay, in place.

    BN ``gamma``/``beta`` are exempt from weight decay. Returns ``state``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.momentum:
            b = state.buf.setdefault(name, np.zeros_like(p))
            b *= cfg.momentum
            b += step
            step = b
        if cfg.weight_decay and _decays(name):
            p -= (lr * cfg.weight_decay) * p
        p -= (lr * step).astype(p.dtype, copy=False)
    return state


# --------------------------------------------------------------------------
# training / evaluation loops
# --------------------------------------------------------------------------


def fit(net, features, targets, cfg, epochs=None, *, lam=None, lr_scale=1.0, rng=None, augment=None,
        on_epoch=None):
    """Mini-batch training with :func:`loss_with_penalty`; returns per-epoch mean losses.

    ``targets`` are class-probability rows. ``augment(x, y, rng)`` may
    transform each batch. A trailing batch of one sample is dropped.
    ``on_epoch(epoch, mean_loss)`` is called after every epoch.
    """
    epochs = cfg.epochs if epochs is None else epochs
    lam = cfg.lam if lam is None else lam
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = net.parameters()
    state = OptimizerState()
    lr = cfg.learning_rate * lr_scale
    n = features.shape[0]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            x, y = features[idx], targets[idx]
            if augment is not None:
                x, y = augment(x, y, rng)
            logits = forward(net, x, "train", cache=True)
            loss = loss_with_penalty(logits, y, net, lam)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at optimizer step {state.step}")
            grads = backward(net, y, lam)
            optimizer_step(params, grads, state, cfg, lr=lr)
            total += loss * idx.size
            seen += idx.size
        net.tape = None
        history.append(total / max(seen, 1))
        if on_epoch is not None:
            on_epoch(len(history) - 1, history[-1])
    return history


def predict(net, features, batch_size=256):
    out = [forward(net, features[i:i + batch_size], "eval").argmax(axis=1)
           for i in range(0, features.shape[0], batch_size)]
    return np.concatenate(out)


def evaluate(net, features, labels, batch_size=256):
    """Eval-mode classification accuracy in [0, 1]."""
    return float(np.mean(predict(net, features, batch_size) == np.asarray(labels)))


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tolerance: float
    failures: list
    checked: int

    @property
    def passed(self):
        return not self.failures


def _kind_of(layer):
    if layer.kind == "conv" and layer.depthwise:
        return "depthwise"
    return layer.kind


def gradient_check(net, batch, labels, lam=0.0, tolerance=1e-4, h=1e-5, mode="train",
                   analytic=None, max_per_param=None, seed=0, check_input=False, abs_floor=1e-6):
    """Compare analytic gradients against central differences in float64.

    Relative error is ``|ga - gf| / max(|ga|, |gf|, abs_floor)``. The floor
    keeps near-zero gradients from being judged on central-difference
    roundoff (about ``eps * loss / h``, 1e-11 at h = 1e-5). The report keys
    are layer kinds (``conv``, ``depthwise``, ``bn``, ``dense`` and
    optionally ``input``). Running statistics are left untouched.
    ``analytic`` substitutes precomputed gradients (negative controls).
    """
    net64 = net.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.astype(np.float64)

    def loss_at():
        logits = forward(net64, batch, mode, update_stats=False)
        return loss_with_penalty(logits, labels, net64, lam)

    forward(net64, batch, mode, cache=True, update_stats=False)
    computed = backward(net64, labels, lam, input_grad=check_input)
    input_grad = net64.tape.input_grad
    if analytic is not None:
        computed = {k: np.asarray(v, dtype=np.float64) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    worst, failures, checked = {}, [], 0

    def compare(label, kind, flat_param, flat_grad, index):
        nonlocal checked
        old = flat_param[index]
        flat_param[index] = old + h
        up = loss_at()
        flat_param[index] = old - h
        down = loss_at()
        flat_param[index] = old
        gf = (up - down) / (2 * h)
        ga = float(flat_grad[index])
        err = abs(ga - gf) / max(abs(ga), abs(gf), abs_floor)
        worst[kind] = max(worst.get(kind, 0.0), err)
        checked += 1
        if err > tolerance:
            failures.append((label, int(index), ga, gf, err))

    for layer in net64.layers:
        for key, value in layer.params.items():
            name = f"{layer.name}.{key}"
            flat = value.reshape(-1)
            grad = computed[name].reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
            for i in idx:
                compare(name, _kind_of(layer), flat, grad, i)
    if check_input:
        flat = batch.reshape(-1)
        grad = input_grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        for i in idx:
            compare("input", "input", flat, grad, i)
    return GradCheckReport(worst, tolerance, failures, checked)
