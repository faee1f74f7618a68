"""2D classification networks exposed as multi-scale feature extractors.

A backbone is any ``nn.Module`` whose forward maps an (N, 3, W, H) image to a
list of feature maps, one per declared tap. Backbones are registered by name
together with their :class:`TapSpec` so a training config can select them.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

logger = logging.getLogger(__name__)

__all__ = [
    "Tap",
    "TapSpec",
    "register_backbone",
    "registered_backbones",
    "build_backbone",
    "backbone_forward",
    "load_pretrained",
    "save_weights",
    "tensor_checksum",
    "WeightLoadError",
    "EfficientNetB0Backbone",
    "ToyBackbone",
]


class WeightLoadError(ValueError):
    pass


@dataclass(frozen=True)
class Tap:
    name: str
    stride: int
    channels: int


class TapSpec(tuple):
    """Ordered taps, shallowest first; the last one is the bottleneck."""

    def __new__(cls, taps: Iterable):
        taps = tuple(t if isinstance(t, Tap) else Tap(*t) for t in taps)
        return super().__new__(cls, taps)

    def validate(self, min_taps: int = 3) -> None:
        if len(self) < min_taps:
            raise ValueError(f"need at least {min_taps} taps, got {len(self)}")
        for t in self:
            if t.stride < 1 or t.stride & (t.stride - 1):
                raise ValueError(f"tap {t.name!r} stride {t.stride} is not a power of two")
            if t.channels < 1:
                raise ValueError(f"tap {t.name!r} has no channels")
        strides = [t.stride for t in self]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"tap strides must strictly increase, got {strides}")

    @property
    def strides(self) -> list[int]:
        return [t.stride for t in self]

    @property
    def channels(self) -> list[int]:
        return [t.channels for t in self]

    def shapes(self, width: int, height: int) -> list[tuple[int, int, int]]:
        """(channels, W/stride, H/stride) per tap."""
        return [(t.channels, width // t.stride, height // t.stride) for t in self]


@dataclass
class _Entry:
    constructor: Callable[[], nn.Module]
    taps: TapSpec


_REGISTRY: dict[str, _Entry] = {}


def register_backbone(name: str, constructor: Callable[[], nn.Module], taps) -> _Entry:
    """Make ``constructor`` selectable by ``name``.

    Raises:
        KeyError: ``name`` is already registered.
    """
    if name in _REGISTRY:
        raise KeyError(f"backbone {name!r} is already registered")
    spec = TapSpec(taps)
    spec.validate()
    entry = _Entry(constructor, spec)
    _REGISTRY[name] = entry
    return entry


def registered_backbones() -> list[str]:
    return sorted(_REGISTRY)


def build_backbone(name: str, seed: int = 0) -> nn.Module:
    try:
        entry = _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown backbone {name!r}; registered: {registered_backbones()}"
        ) from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = entry.constructor()
    model.taps = entry.taps
    model.backbone_name = name
    return model


def backbone_forward(backbone: nn.Module, image: torch.Tensor) -> list[torch.Tensor]:
    """Extract the tap feature maps of ``image`` (N, 3, W, H).

    Only the feature layers run; classification heads are never part of a
    registered backbone.
    """
    spec: TapSpec = backbone.taps
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"backbone input must be (N, 3, W, H), got {tuple(image.shape)}")
    w, h = image.shape[-2:]
    deepest = spec[-1].stride
    if w % deepest or h % deepest:
        raise ValueError(
            f"spatial dims {w}x{h} are not divisible by the deepest tap stride {deepest}"
        )
    feats = list(backbone(image))
    if len(feats) != len(spec):
        raise RuntimeError(f"backbone returned {len(feats)} maps for {len(spec)} taps")
    for f, (c, tw, th), tap in zip(feats, spec.shapes(w, h), spec):
        if tuple(f.shape[1:]) != (c, tw, th):
            raise RuntimeError(
                f"tap {tap.name!r} produced {tuple(f.shape[1:])}, declared {(c, tw, th)}"
            )
    return feats


class EfficientNetB0Backbone(nn.Module):
    """torchvision EfficientNet-B0 feature stages, tapped at every stride change.

    The 1x1 head convolution (``features.8``), pooling and classifier are
    dropped; parameter names match torchvision's ``state_dict`` so published
    weight files load without renaming.
    """

    # index into torchvision's ``features`` after which each tap is read
    TAP_AFTER = (1, 2, 3, 5, 7)
    TAPS = TapSpec(
        [
            ("stage1", 2, 16),
            ("stage2", 4, 24),
            ("stage3", 8, 40),
            ("stage5", 16, 112),
            ("stage7", 32, 320),
        ]
    )
    IGNORED_PREFIXES = ("features.8.", "classifier.")

    def __init__(self):
        super().__init__()
        from torchvision.models import efficientnet_b0

        full = efficientnet_b0(weights=None)
        self.features = nn.Sequential(*list(full.features)[: self.TAP_AFTER[-1] + 1])

    def forward(self, x):
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.TAP_AFTER:
                out.append(x)
        return out


class ToyBackbone(nn.Module):
    """Three stride-2 conv layers; a desk-scale stand-in for a real classifier."""

    TAPS = TapSpec([("conv1", 2, 8), ("conv2", 4, 16), ("conv3", 8, 32)])

    def __init__(self, widths=(8, 16, 32)):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], kernel_size=3, stride=2, padding=1)
            for i in range(len(widths))
        )

    def forward(self, x):
        out = []
        for conv in self.convs:
            x = F.relu(conv(x))
            out.append(x)
        return out


def tensor_checksum(tensors: dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(t.shape)).encode())
        digest.update(t.numpy().tobytes())
    return digest.hexdigest()


def save_weights(module_or_state, path) -> None:
    """Write a name -> tensor safetensors archive."""
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    save_file({k: v.detach().cpu().contiguous() for k, v in state.items()}, str(path))


def load_pretrained(backbone: nn.Module, weights) -> nn.Module:
    """Overwrite every backbone tensor from a safetensors file.

    Tensors under the backbone's ``IGNORED_PREFIXES`` (classification head)
    are skipped. Any other unknown tensor, a missing tensor or a shape
    mismatch raises :class:`WeightLoadError` naming the tensor.
    """
    stored = load_file(str(weights))
    ignored = tuple(getattr(backbone, "IGNORED_PREFIXES", ()))
    own = backbone.state_dict()

    for name, tensor in stored.items():
        if name.startswith(ignored):
            continue
        if name not in own:
            raise WeightLoadError(f"unexpected tensor {name!r} in {weights}")
        if tuple(tensor.shape) != tuple(own[name].shape):
            raise WeightLoadError(
                f"shape mismatch for {name!r}: file {tuple(tensor.shape)}, "
                f"model {tuple(own[name].shape)}"
            )
    missing = [
        k for k in own
        if k not in stored and not k.endswith("num_batches_tracked")
    ]
    if missing:
        raise WeightLoadError(f"missing tensor {missing[0]!r} ({len(missing)} missing) in {weights}")

    new_state = {k: stored.get(k, v) for k, v in own.items()}
    backbone.load_state_dict(new_state)
    checksum = tensor_checksum({k: v for k, v in backbone.state_dict().items()})
    backbone.weights_checksum = checksum
    logger.info("loaded backbone weights from %s (sha256 %s)", weights, checksum)
    return backbone


register_backbone("efficientnet-b0", EfficientNetB0Backbone, EfficientNetB0Backbone.TAPS)
register_backbone("toy", ToyBackbone, ToyBackbone.TAPS)
