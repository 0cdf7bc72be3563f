"""Scaling-factor channel ranking, structural channel removal and the
iterative prune / fine-tune / evaluate loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .archzoo import count_parameters
from .nncore import TrainingConfig, fit

log = logging.getLogger(__name__)

STRATEGIES = ("global_gamma", "layer_quota")


class PruneError(ValueError):
    """A victim set violates a structural constraint."""

    def __init__(self, message, channel=None):
        super().__init__(message)
        self.channel = channel


@dataclass(frozen=True)
class ChannelRef:
    layer_index: int
    channel_index: int
    gamma_value: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class PruneStrategy:
    kind: str = "global_gamma"
    protected: frozenset = frozenset()
    min_channels_per_layer: int = 1

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.min_channels_per_layer < 1:
            raise ValueError("min_channels_per_layer must be >= 1")
        object.__setattr__(self, "protected", frozenset(self.protected))


# --------------------------------------------------------------------------
# channel coupling
# --------------------------------------------------------------------------

_PASS_THROUGH = ("relu", "maxpool")


def coupled_slices(net, bn_index):
    """Every (layer index, role) touched when a channel of BN ``bn_index`` is removed.

    Roles: ``out`` (producer conv output), ``bn``, ``dw`` (depthwise conv
    coupled channel), ``in`` (consuming conv input), ``dense_in``. Raises
    :class:`PruneError` if the channel reaches a residual add.
    """
    bn = net.layers[bn_index]
    if bn.kind != "bn":
        raise PruneError(f"layer {bn_index} is not a BN layer")
    (producer,) = net.inputs[bn_index]
    conv = net.layers[producer] if producer >= 0 else None
    if conv is None or conv.kind != "conv" or conv.depthwise:
        raise PruneError(f"BN layer {bn_index} does not follow a standard conv")
    if len(net.consumers(producer)) != 1:
        raise PruneError(f"conv layer {producer} feeds more than one layer")
    slices = [(producer, "out"), (bn_index, "bn")]
    frontier = [bn_index]
    seen = set()
    while frontier:
        node = frontier.pop()
        for nxt in net.consumers(node):
            if nxt in seen:
                continue
            seen.add(nxt)
            layer = net.layers[nxt]
            if layer.kind in _PASS_THROUGH or layer.kind == "gap":
                frontier.append(nxt)
            elif layer.kind == "conv" and layer.depthwise:
                slices.append((nxt, "dw"))
                frontier.append(nxt)
            elif layer.kind == "conv":
                slices.append((nxt, "in"))
            elif layer.kind == "bn":
                slices.append((nxt, "bn"))
                frontier.append(nxt)
            elif layer.kind == "dense":
                if net.layers[node].kind != "gap":
                    raise PruneError(f"dense layer {nxt} is not fed by global pooling")
                slices.append((nxt, "dense_in"))
            else:
                raise PruneError(f"channel of BN layer {bn_index} reaches {layer.kind} layer {nxt}")
    return slices


def prunable_layers(net, protected=()):
    """BN layer indices whose channels may be ranked and removed."""
    out = []
    for i, layer in net.bn_layers():
        if not layer.prunable or i in protected:
            continue
        try:
            coupled_slices(net, i)
        except PruneError:
            continue
        out.append(i)
    return out


def prunable_channel_count(net, protected=()):
    return sum(net.layers[i].channels for i in prunable_layers(net, protected))


# --------------------------------------------------------------------------
# ranking and removal
# --------------------------------------------------------------------------


def rank_channels(net, strategy=PruneStrategy()):
    """Pruning order, lowest |gamma| first.

    ``global_gamma`` sorts the whole network by magnitude; ``layer_quota``
    sorts within each layer and interleaves layers by the fraction of the
    layer removed so far. Ties go to the lower (layer, channel). The
    ``min_channels_per_layer`` largest channels of each layer never appear.
    """
    entries = []
    for i in prunable_layers(net, strategy.protected):
        layer = net.layers[i]
        mags = np.abs(np.asarray(layer.params["gamma"], dtype=np.float64))
        ids = layer.channel_ids
        order = sorted(range(len(ids)), key=lambda k: (mags[k], ids[k]))
        eligible = order[:max(0, len(order) - strategy.min_channels_per_layer)]
        for rank, k in enumerate(eligible):
            ref = ChannelRef(i, int(ids[k]), float(layer.params["gamma"][k]))
            entries.append(((rank + 1) / len(ids), float(mags[k]), i, int(ids[k]), ref))
    if strategy.kind == "global_gamma":
        entries.sort(key=lambda e: (e[1], e[2], e[3]))
    else:
        entries.sort(key=lambda e: (e[0], e[1], e[2], e[3]))
    return [e[-1] for e in entries]


def prune_channels(net, victims, min_channels_per_layer=1):
    """Return a smaller copy of ``net`` without the ``victims`` channels.

    Surviving weights are copied exactly; the input network is untouched.
    """
    by_layer = {}
    for ref in victims:
        by_layer.setdefault(ref.layer_index, set()).add(ref.channel_index)
    pruned = net.clone()
    for bn_index in sorted(by_layer):
        doomed = by_layer[bn_index]
        ref0 = ChannelRef(bn_index, min(doomed))
        if not 0 <= bn_index < len(net.layers) or net.layers[bn_index].kind != "bn":
            raise PruneError(f"layer {bn_index} is not a BN layer", ref0)
        bn = pruned.layers[bn_index]
        if not bn.prunable:
            raise PruneError(f"BN layer {bn_index} is protected", ref0)
        try:
            slices = coupled_slices(pruned, bn_index)
        except PruneError as err:
            raise PruneError(str(err), ref0) from None
        present = set(int(c) for c in bn.channel_ids)
        for c in sorted(doomed):
            if c not in present:
                raise PruneError(f"channel {c} not present in layer {bn_index}", ChannelRef(bn_index, c))
        keep = np.array([int(c) not in doomed for c in bn.channel_ids])
        if keep.sum() < min_channels_per_layer:
            raise PruneError(f"layer {bn_index} would keep {keep.sum()} < {min_channels_per_layer} channels", ref0)
        _apply(pruned, slices, keep)
    return pruned


def _apply(net, slices, keep):
    idx = np.flatnonzero(keep)
    for li, role in slices:
        layer = net.layers[li]
        if role == "out":
            layer.params["weight"] = layer.params["weight"][idx].copy()
            layer.cout = idx.size
        elif role == "bn":
            for store in (layer.params, layer.buffers):
                for key in store:
                    store[key] = store[key][idx].copy()
            layer.channel_ids = layer.channel_ids[idx].copy()
        elif role == "dw":
            layer.params["weight"] = layer.params["weight"][idx].copy()
            layer.cin = layer.cout = layer.groups = idx.size
        elif role == "in":
            layer.params["weight"] = layer.params["weight"][:, idx].copy()
            layer.cin = idx.size
        elif role == "dense_in":
            layer.params["weight"] = layer.params["weight"][:, idx].copy()
            layer.fin = idx.size


def param_prune_fraction(original, pruned):
    """Fraction of trainable parameters removed, in [0, 1]."""
    before = count_parameters(original)
    after = count_parameters(pruned)
    if after > before:
        raise ValueError(f"pruned network has more parameters ({after}) than the original ({before})")
    return 1.0 - after / before


# --------------------------------------------------------------------------
# iterative pruning
# --------------------------------------------------------------------------


@dataclass
class CurvePoint:
    step_index: int
    channel_prune_fraction: float
    param_prune_fraction: float
    accuracy: float
    accuracy_loss: float


@dataclass
class PruningCurve:
    points: list
    complete: bool = True
    error: str | None = None

    def __len__(self):
        return len(self.points)

    def column(self, name):
        return np.array([getattr(p, name) for p in self.points], dtype=np.float64)

    def validate(self):
        ch = self.column("channel_prune_fraction")
        pp = self.column("param_prune_fraction")
        if np.any(np.diff(ch) <= 0):
            raise ValueError("channel_prune_fraction must be strictly increasing")
        if np.any(np.diff(pp) < 0):
            raise ValueError("param_prune_fraction must be nondecreasing")
        p0 = self.points[0]
        if p0.channel_prune_fraction != 0 or p0.param_prune_fraction != 0 or p0.accuracy_loss != 0:
            raise ValueError("the first point must be the unpruned baseline")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step_index", "channels_pruned_frac", "params_pruned_frac", "accuracy", "accuracy_loss"])
            for p in self.points:
                writer.writerow([p.step_index, f"{p.channel_prune_fraction:.6f}", f"{p.param_prune_fraction:.6f}",
                                 f"{p.accuracy:.6f}", f"{p.accuracy_loss:.6f}"])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        points = [CurvePoint(int(r["step_index"]), float(r["channels_pruned_frac"]), float(r["params_pruned_frac"]),
                             float(r["accuracy"]), float(r["accuracy_loss"])) for r in rows]
        return cls(points)


def iterative_prune(net, step_fraction=0.05, finetune_epochs=5, eval_fn=None, strategy=PruneStrategy(),
                    train_data=None, config=None, augment=None, seed=0, keep_nets=False):
    """Prune ``step_fraction`` of the original prunable channels per step until
    the per-layer floors stop progress, fine-tuning and evaluating after each step.

    ``train_data`` is ``(features, targets)`` with class-probability targets.
    Fine-tuning uses ``config`` with learning rate x0.1 and no sparsity
    penalty. The input network is not modified. If ``eval_fn`` raises, the
    partial curve is returned with ``complete=False``.
    With ``keep_nets`` the pruned network after each step is attached as
    ``curve.nets``.
    """
    if not 0 < step_fraction < 1:
        raise ValueError("step_fraction must lie in (0, 1)")
    if eval_fn is None:
        raise ValueError("eval_fn is required")
    if finetune_epochs and train_data is None:
        raise ValueError("fine-tuning requires train_data")
    config = config or TrainingConfig()
    rng = np.random.default_rng(seed)
    baseline = float(eval_fn(net))
    total = prunable_channel_count(net, strategy.protected)
    if total == 0:
        raise PruneError("network has no prunable channels")
    per_step = max(1, int(round(step_fraction * total)))
    curve = PruningCurve([CurvePoint(0, 0.0, 0.0, baseline, 0.0)])
    nets = [net]
    current = net
    removed = 0
    step = 0
    while True:
        ranking = rank_channels(current, strategy)
        if not ranking:
            break
        victims = ranking[:per_step]
        current = prune_channels(current, victims, strategy.min_channels_per_layer)
        removed += len(victims)
        step += 1
        if finetune_epochs:
            features, targets = train_data
            fit(current, features, targets, config, finetune_epochs, lam=0.0, lr_scale=0.1, rng=rng, augment=augment)
        try:
            acc = float(eval_fn(current))
        except Exception as err:  # noqa: BLE001 - any evaluation failure ends the sweep
            log.warning("evaluation failed at step %d: %s", step, err)
            curve.complete = False
            curve.error = f"{type(err).__name__}: {err}"
            break
        curve.points.append(CurvePoint(step, removed / total, param_prune_fraction(net, current), acc, baseline - acc))
        if keep_nets:
            nets.append(current)
        log.debug("step %d: removed %d/%d channels, acc %.4f", step, removed, total, acc)
    if keep_nets:
        curve.nets = nets
    return curve
