import logging

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from safetensors.torch import load_file
from torchvision.models import efficientnet_b0, efficientnet_b1

from dimshrink.backbones import (
    TapSpec,
    WeightLoadError,
    backbone_forward,
    build_backbone,
    load_pretrained,
    register_backbone,
    registered_backbones,
    save_weights,
    tensor_checksum,
)

# recorded once from the reference backbone on a 192x160 image
B0_TAP_SHAPES_192x160 = [(16, 96, 80), (24, 48, 40), (40, 24, 20), (112, 12, 10), (320, 6, 5)]


@pytest.fixture(scope="module")
def b0():
    return build_backbone("efficientnet-b0", seed=0).eval()


def test_builtin_registry():
    assert {"efficientnet-b0", "toy"} <= set(registered_backbones())


def test_b0_tap_shapes(b0):
    with torch.no_grad():
        taps = backbone_forward(b0, torch.randn(1, 3, 192, 160))
    assert [tuple(t.shape[1:]) for t in taps] == B0_TAP_SHAPES_192x160
    assert b0.taps.strides == [2, 4, 8, 16, 32]


def test_b0_has_no_head(b0):
    names = {n for n, _ in b0.named_modules()}
    assert "classifier" not in names and "features.8" not in names


def test_minimal_input(b0):
    with torch.no_grad():
        taps = backbone_forward(b0, torch.randn(1, 3, 32, 32))
    assert tuple(taps[-1].shape[-2:]) == (1, 1)


def test_indivisible_input(b0):
    with pytest.raises(ValueError, match="divisible"):
        backbone_forward(b0, torch.randn(1, 3, 190, 160))


def test_wrong_channel_count(b0):
    with pytest.raises(ValueError):
        backbone_forward(b0, torch.randn(1, 4, 64, 64))


def test_duplicate_registration():
    with pytest.raises(KeyError):
        register_backbone("efficientnet-b0", nn.Identity, [("a", 2, 1), ("b", 4, 1), ("c", 8, 1)])


def test_unknown_backbone():
    with pytest.raises(KeyError):
        build_backbone("resnet-9000")


@pytest.mark.parametrize(
    "taps",
    [
        [("a", 2, 4), ("b", 4, 4)],
        [("a", 2, 4), ("b", 2, 4), ("c", 4, 4)],
        [("a", 2, 4), ("b", 6, 4), ("c", 8, 4)],
    ],
)
def test_tapspec_invariants(taps):
    with pytest.raises(ValueError):
        TapSpec(taps).validate()


class ThreeLayer(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Conv2d(3, 4, 3, stride=2, padding=1)
        self.b = nn.Conv2d(4, 6, 3, stride=2, padding=1)
        self.c = nn.Conv2d(6, 8, 3, stride=2, padding=1)

    def forward(self, x):
        a = torch.relu(self.a(x))
        b = torch.relu(self.b(a))
        return [a, b, torch.relu(self.c(b))]


def test_register_custom_backbone():
    name = "three-layer-test"
    if name not in registered_backbones():
        register_backbone(name, ThreeLayer, [("a", 2, 4), ("b", 4, 6), ("c", 8, 8)])
    net = build_backbone(name)
    taps = backbone_forward(net, torch.randn(1, 3, 16, 24))
    assert [tuple(t.shape[1:]) for t in taps] == [(4, 8, 12), (6, 4, 6), (8, 2, 3)]


@settings(max_examples=15, deadline=None)
@given(w=st.integers(1, 6), h=st.integers(1, 6), name=st.sampled_from(["toy", "efficientnet-b0"]))
def test_tap_contract_random_sizes(w, h, name):
    net = build_backbone(name).eval()
    deepest = net.taps.strides[-1]
    with torch.no_grad():
        taps = backbone_forward(net, torch.randn(1, 3, w * deepest, h * deepest))
    assert [tuple(t.shape[1:]) for t in taps] == net.taps.shapes(w * deepest, h * deepest)


@pytest.fixture(scope="module")
def b0_weights(tmp_path_factory):
    """A full torchvision B0 state dict, classifier head included."""
    torch.manual_seed(11)
    path = tmp_path_factory.mktemp("w") / "b0.safetensors"
    save_weights(efficientnet_b0(weights=None), path)
    return path


def test_load_pretrained(b0_weights, caplog):
    net = build_backbone("efficientnet-b0", seed=5)
    with caplog.at_level(logging.INFO, logger="dimshrink.backbones"):
        load_pretrained(net, b0_weights)
    stored = load_file(str(b0_weights))
    name = "features.3.0.block.1.0.weight"
    assert torch.equal(net.state_dict()[name], stored[name])
    expected = tensor_checksum({k: stored[k] for k in net.state_dict()})
    assert net.weights_checksum == expected
    assert expected in caplog.text


def test_load_twice_idempotent(b0_weights):
    net = build_backbone("efficientnet-b0", seed=5)
    load_pretrained(net, b0_weights)
    first = {k: v.clone() for k, v in net.state_dict().items()}
    load_pretrained(net, b0_weights)
    assert all(torch.equal(first[k], v) for k, v in net.state_dict().items())


def test_shape_mismatch_names_tensor(b0_weights, tmp_path):
    state = load_file(str(b0_weights))
    state["features.2.0.block.0.0.weight"] = torch.zeros(5, 5, 1, 1)
    path = tmp_path / "bad.safetensors"
    save_weights(state, path)
    with pytest.raises(WeightLoadError, match=r"features\.2\.0\.block\.0\.0\.weight"):
        load_pretrained(build_backbone("efficientnet-b0"), path)


def test_b1_file_rejected(tmp_path):
    path = tmp_path / "b1.safetensors"
    save_weights(efficientnet_b1(weights=None), path)
    with pytest.raises(WeightLoadError):
        load_pretrained(build_backbone("efficientnet-b0"), path)


def test_missing_tensor(b0_weights, tmp_path):
    state = load_file(str(b0_weights))
    del state["features.0.0.weight"]
    path = tmp_path / "partial.safetensors"
    save_weights(state, path)
    with pytest.raises(WeightLoadError, match="features.0.0.weight"):
        load_pretrained(build_backbone("efficientnet-b0"), path)
