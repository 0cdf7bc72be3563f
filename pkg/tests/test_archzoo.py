import warnings

import numpy as np
import pytest

from wsprune.archzoo import (ArchSpec, ArchSpecError, build_network, conv_bn_pairs, count_parameters, describe,
                             scaled_width, vgg_plan)
from wsprune.nncore import forward


def vgg_count(widths, cin=1, classes=10):
    total, prev = 0, cin
    for w in widths:
        total += 9 * prev * w + 2 * w
        prev = w
    return total + prev * classes + classes


@pytest.mark.parametrize("depth,widths", [
    (11, [16, 32, 64, 64, 64, 64, 64, 64]),
    (16, [16, 16, 32, 32, 64, 64, 64] + [64] * 6),
    (7, [16, 32, 64, 64]),
])
def test_vgg_counts_match_layer_arithmetic(depth, widths):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        net = build_network(ArchSpec("vgg", depth))
    assert count_parameters(net) == vgg_count(widths)


def test_frozen_counts():
    frozen = {("vgg", 11, None): 209018, ("vgg", 16, None): 331610, ("resnet", 20, None): 272186,
              ("mobilenet", None, 0.5): 43402, ("mobilenet", None, 1.0): 159754}
    for (family, depth, width), expect in frozen.items():
        assert count_parameters(build_network(ArchSpec(family, depth, width))) == expect


def test_buffers_add_two_per_bn_channel():
    net = build_network(ArchSpec("vgg", 11))
    channels = sum(layer.channels for _, layer in net.bn_layers())
    assert count_parameters(net, buffers=True) - count_parameters(net) == 2 * channels


def test_every_conv_has_bn_with_half_gamma():
    for spec in (ArchSpec("vgg", 13), ArchSpec("resnet", 11), ArchSpec("mobilenet", None, 0.25)):
        net = build_network(spec)
        pairs = conv_bn_pairs(net)
        assert len(pairs) == sum(layer.kind == "conv" for layer in net.layers)
        for _, bn in pairs:
            assert np.all(net.layers[bn].params["gamma"] == 0.5)


def test_vgg_plan_nonstandard():
    assert vgg_plan(7) == [0, "M", 1, "M", 2, "M", 3, "M"]
    assert sum(1 for v in vgg_plan(9) if v != "M") == 6
    with pytest.warns(UserWarning):
        build_network(ArchSpec("vgg", 7))


def test_mobilenet_widths():
    assert scaled_width(16, 0.25) == 4
    assert scaled_width(3, 0.5) == 2
    assert scaled_width(1, 0.01) == 1


def test_deterministic_in_seed():
    a = build_network(ArchSpec("resnet", 11), seed=3)
    b = build_network(ArchSpec("resnet", 11), seed=3)
    c = build_network(ArchSpec("resnet", 11), seed=4)
    pa, pb, pc = a.parameters(), b.parameters(), c.parameters()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert any(not np.array_equal(pa[k], pc[k]) for k in pa)


@pytest.mark.parametrize("spec", [ArchSpec("vgg", 19, input_shape=(1, 40, 16)),
                                  ArchSpec("resnet", 38, input_shape=(1, 8, 8), base_channels=4),
                                  ArchSpec("mobilenet", None, 0.75, input_shape=(1, 4, 4), base_channels=4)])
def test_small_inputs_still_run(spec):
    net = build_network(spec)
    out = forward(net, np.zeros((2,) + spec.input_shape, dtype=np.float32))
    assert out.shape == (2, 10)


def test_spec_validation_and_roundtrip():
    with pytest.raises(ArchSpecError):
        ArchSpec("alexnet", 8)
    with pytest.raises(ArchSpecError):
        ArchSpec("vgg", None)
    with pytest.raises(ArchSpecError):
        ArchSpec("mobilenet", 3)
    with pytest.raises(ArchSpecError):
        ArchSpec("mobilenet", None, 1.5)
    spec = ArchSpec("resnet", 29, num_classes=4, base_channels=8)
    assert ArchSpec.from_dict(spec.to_dict()) == spec
    assert spec.standard and not ArchSpec("resnet", 14).standard


def test_describe_rows():
    rows = describe(build_network(ArchSpec("mobilenet", None, 0.25)))
    kinds = {r[2] for r in rows}
    assert {"conv", "bn", "relu", "gap", "dense"} <= kinds
    assert any("g" in r[4] and not r[4].endswith("g1") for r in rows if r[2] == "conv")
