"""VGG-, ResNet- and MobileNet-style builders at desk-scale widths.

Every convolution is followed directly by a BatchNorm layer whose ``gamma``
starts at 0.5. No dropout. The head is global average pooling plus one
dense layer. Layer plans are listed in ``docs/architectures.md``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .nncore import Add, BatchNorm2d, Conv2d, Dense, GlobalAvgPool, MaxPool2d, NetworkGraph, ReLU

FAMILIES = ("vgg", "resnet", "mobilenet")
CATALOGUE_VARIANTS = {
    "vgg": (11, 13, 16, 19),
    "resnet": (11, 20, 29, 38),
    "mobilenet": (0.25, 0.5, 0.75, 1.0),
}

# stage index per conv, "M" = 2x2 max pool; stage s has width base * VGG_STAGE_MULT[s]
VGG_PLANS = {
    11: [0, "M", 1, "M", 2, 2, "M", 3, 3, "M", 4, 4, "M"],
    13: [0, 0, "M", 1, 1, "M", 2, 2, "M", 3, 3, "M", 4, 4, "M"],
    16: [0, 0, "M", 1, 1, "M", 2, 2, 2, "M", 3, 3, 3, "M", 4, 4, 4, "M"],
    19: [0, 0, "M", 1, 1, "M", 2, 2, 2, 2, "M", 3, 3, 3, 3, "M", 4, 4, 4, 4, "M"],
}
VGG_STAGE_MULT = (1, 2, 4, 4, 4)

RESNET_BLOCKS = {11: (1, 1, 1), 20: (3, 3, 3), 29: (4, 4, 4), 38: (6, 6, 6)}
RESNET_STAGE_MULT = (1, 2, 4)

# (width multiple of base, stride) per depthwise-separable block
MOBILENET_STEM = (1, 2)
MOBILENET_BLOCKS = [(2, 1), (4, 2), (4, 1), (8, 2), (8, 1), (8, 1), (16, 2), (16, 1)]


class ArchSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    family: str
    depth: int | None = None
    width_multiplier: float | None = None
    num_classes: int = 10
    input_shape: tuple = (1, 40, 128)
    base_channels: int = 16

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ArchSpecError(f"unknown family {self.family!r}")
        if self.family == "mobilenet":
            if self.depth is not None:
                raise ArchSpecError("mobilenet takes width_multiplier, not depth")
            w = 1.0 if self.width_multiplier is None else self.width_multiplier
            if not 0 < w <= 1:
                raise ArchSpecError("width_multiplier must lie in (0, 1]")
        else:
            if self.width_multiplier is not None:
                raise ArchSpecError(f"{self.family} takes depth, not width_multiplier")
            if self.depth is None or self.depth < (4 if self.family == "vgg" else 8):
                raise ArchSpecError(f"{self.family} needs a valid depth, got {self.depth}")
        if self.num_classes < 2 or self.base_channels < 1:
            raise ArchSpecError("num_classes must be >= 2 and base_channels >= 1")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchSpecError(f"input_shape must be (channels, mel_bands, frames), got {self.input_shape}")

    @property
    def standard(self):
        value = self.width_multiplier if self.family == "mobilenet" else self.depth
        if self.family == "mobilenet" and value is None:
            value = 1.0
        return value in CATALOGUE_VARIANTS[self.family]

    def to_dict(self):
        return {
            "family": self.family,
            "depth": self.depth,
            "width_multiplier": self.width_multiplier,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "base_channels": self.base_channels,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data[k] for k in ("family", "depth", "width_multiplier", "num_classes",
                                           "input_shape", "base_channels") if k in data})


def vgg_plan(depth):
    """Stage plan for a VGG depth; nonstandard depths spread ``depth - 3`` convs over up to 5 stages."""
    if depth in VGG_PLANS:
        return list(VGG_PLANS[depth])
    convs = depth - 3
    stages = min(5, convs)
    per = [convs // stages + (1 if s >= stages - convs % stages else 0) for s in range(stages)]
    plan = []
    for s, count in enumerate(per):
        plan += [s] * count + ["M"]
    return plan


def resnet_blocks(depth):
    if depth in RESNET_BLOCKS:
        return RESNET_BLOCKS[depth]
    n = max(1, round((depth - 2) / 6))
    return (n, n, n)


def scaled_width(channels, multiplier):
    """``ceil(multiplier * channels)``, at least 1."""
    return max(1, math.ceil(multiplier * channels - 1e-9))


class _Builder:
    def __init__(self, rng, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.layers = []
        self.inputs = []
        self.counts = {}

    def _name(self, kind):
        self.counts[kind] = self.counts.get(kind, 0) + 1
        return f"{kind}{self.counts[kind]}"

    def add(self, layer, srcs):
        self.layers.append(layer)
        self.inputs.append(tuple(srcs))
        return len(self.layers) - 1

    def conv_bn(self, src, cin, cout, kernel=3, stride=1, groups=1, relu=True, prunable=False):
        fan_in = (cin // groups) * kernel * kernel
        w = self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin // groups, kernel, kernel))
        conv = Conv2d(self._name("conv"), cin, cout, kernel, stride, kernel // 2, groups,
                      weight=w.astype(self.dtype))
        i = self.add(conv, [src])
        bn = BatchNorm2d(self._name("bn"), cout, dtype=self.dtype)
        bn.prunable = prunable
        i = self.add(bn, [i])
        if relu:
            i = self.add(ReLU(self._name("relu")), [i])
        return i

    def head(self, src, channels, num_classes):
        i = self.add(GlobalAvgPool(self._name("gap")), [src])
        w = self.rng.normal(0.0, math.sqrt(1.0 / channels), size=(num_classes, channels))
        dense = Dense(self._name("dense"), channels, num_classes,
                      weight=w.astype(self.dtype), bias=np.zeros(num_classes, self.dtype))
        return self.add(dense, [i])


def _conv_out(size, stride):
    return (size + 2 - 3) // stride + 1


def build_network(spec, seed=0):
    """Build a freshly initialised network for ``spec``; deterministic in ``seed``."""
    if isinstance(spec, dict):
        spec = ArchSpec.from_dict(spec)
    spec.validate()
    if not spec.standard:
        warnings.warn(f"nonstandard {spec.family} variant {spec.depth or spec.width_multiplier}", stacklevel=2)
    b = _Builder(np.random.default_rng(seed))
    cin, h, w = spec.input_shape
    base = spec.base_channels
    src = -1
    if spec.family == "vgg":
        for item in vgg_plan(spec.depth):
            if item == "M":
                if h >= 2 and w >= 2:
                    src = b.add(MaxPool2d(b._name("pool")), [src])
                    h, w = h // 2, w // 2
                continue
            cout = base * VGG_STAGE_MULT[item]
            src = b.conv_bn(src, cin, cout, prunable=True)
            cin = cout
    elif spec.family == "resnet":
        cout = base * RESNET_STAGE_MULT[0]
        src = b.conv_bn(src, cin, cout)
        cin = cout
        for stage, blocks in enumerate(resnet_blocks(spec.depth)):
            width = base * RESNET_STAGE_MULT[stage]
            for k in range(blocks):
                stride = 2 if stage > 0 and k == 0 and min(h, w) >= 2 else 1
                mid = b.conv_bn(src, cin, width, stride=stride, prunable=True)
                out = b.conv_bn(mid, width, width, relu=False)
                if stride != 1 or cin != width:
                    short = b.conv_bn(src, cin, width, kernel=1, stride=stride, relu=False)
                else:
                    short = src
                src = b.add(Add(b._name("add")), [out, short])
                src = b.add(ReLU(b._name("relu")), [src])
                cin = width
                if stride == 2:
                    h, w = _conv_out(h, 2), _conv_out(w, 2)
    else:
        alpha = 1.0 if spec.width_multiplier is None else spec.width_multiplier
        mult, stride = MOBILENET_STEM
        if min(h, w) < 2:
            stride = 1
        cout = scaled_width(base * mult, alpha)
        src = b.conv_bn(src, cin, cout, stride=stride, prunable=True)
        h, w = _conv_out(h, stride), _conv_out(w, stride)
        cin = cout
        for mult, stride in MOBILENET_BLOCKS:
            if min(h, w) < 2:
                stride = 1
            src = b.conv_bn(src, cin, cin, stride=stride, groups=cin)
            cout = scaled_width(base * mult, alpha)
            src = b.conv_bn(src, cin, cout, kernel=1, prunable=True)
            h, w = _conv_out(h, stride), _conv_out(w, stride)
            cin = cout
    b.head(src, cin, spec.num_classes)
    return NetworkGraph(b.layers, b.inputs, spec.input_shape, spec.num_classes, arch=spec)


def count_parameters(net, buffers=False):
    """Parameter count: conv ``kh*kw*(cin/groups)*cout``, BN ``2*c`` (``4*c`` with
    running statistics when ``buffers``), dense ``in*out + out``."""
    total = sum(p.size for _, p in net.named_parameters())
    if buffers:
        total += sum(v.size for _, v in net.named_buffers())
    return int(total)


def conv_bn_pairs(net):
    """(conv index, bn index) for every conv; raises if a conv is not followed by a matching BN."""
    pairs = []
    for i, layer in enumerate(net.layers):
        if layer.kind != "conv":
            continue
        followers = net.consumers(i)
        if len(followers) != 1 or net.layers[followers[0]].kind != "bn":
            raise ValueError(f"conv layer {i} ({layer.name}) is not followed by a BN layer")
        bn = net.layers[followers[0]]
        if bn.channels != layer.cout:
            raise ValueError(f"conv {layer.name} has {layer.cout} channels but {bn.name} has {bn.channels}")
        pairs.append((i, followers[0]))
    return pairs


def describe(net):
    """One row per layer: index, name, kind, inputs and shape summary."""
    rows = []
    for i, (layer, srcs) in enumerate(zip(net.layers, net.inputs)):
        if layer.kind == "conv":
            info = f"{layer.cin}->{layer.cout} k{layer.kernel} s{layer.stride} g{layer.groups}"
        elif layer.kind == "bn":
            info = f"{layer.channels}{' prunable' if layer.prunable else ''}"
        elif layer.kind == "dense":
            info = f"{layer.fin}->{layer.fout}"
        else:
            info = ""
        rows.append((i, layer.name, layer.kind, srcs, info))
    return rows
