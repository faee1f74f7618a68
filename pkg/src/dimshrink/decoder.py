"""2D and 3D decoders plus the assembled segmentation network.

The 2D decoder climbs the backbone taps back to the W x H resolution of the
shrink-encoder image. Its output channels are split into three depth slices
(the inverse of the encoder's depth-to-channel bridge), and the 3D decoder
then re-expands depth stage by stage, fusing the encoder skips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import backbone_forward, build_backbone, load_pretrained
from .blocks import ResBlock
from .shrink_encoder import (
    TARGET_DEPTH,
    ShrinkConfig,
    as_volume_tensor,
    build_shrink_encoder,
    channels_to_depth,
    shrink_forward,
)

__all__ = [
    "DecoderConfig",
    "Decoder2D",
    "Decoder3D",
    "DimShrinkNet",
    "build_model",
    "decode2d",
    "decode3d",
    "segment",
]

UPSAMPLE_MODES = ("nearest", "linear")


@dataclass
class DecoderConfig:
    """Decoder widths.

    ``channels_2d`` has one entry per backbone tap minus one, ``channels_3d``
    one entry per shrink stage (deepest first). ``bridge_channels`` is the
    feature count per depth slice where the 2D output is folded back to 3D.
    """

    channels_2d: tuple[int, ...] = (256, 128, 64, 32)
    channels_3d: tuple[int, ...] = (64, 32, 16)
    bridge_channels: int = 16
    groups: int = 8
    upsample: str = "nearest"

    def __post_init__(self):
        self.channels_2d = tuple(int(c) for c in self.channels_2d)
        self.channels_3d = tuple(int(c) for c in self.channels_3d)
        if self.upsample not in UPSAMPLE_MODES:
            raise ValueError(f"upsample must be one of {UPSAMPLE_MODES}, got {self.upsample!r}")


def _up2d(x, factor, mode):
    if factor == 1:
        return x
    return F.interpolate(
        x, scale_factor=factor, mode="nearest" if mode == "nearest" else "bilinear",
        align_corners=None if mode == "nearest" else False,
    )


def _up_depth(x, factor, mode):
    if factor == 1:
        return x
    if mode == "nearest":
        return x.repeat_interleave(factor, dim=-1)
    return F.interpolate(x, scale_factor=(1, 1, factor), mode="trilinear", align_corners=False)


class Decoder2D(nn.Module):
    def __init__(self, tap_strides, tap_channels, cfg: DecoderConfig):
        super().__init__()
        if len(cfg.channels_2d) != len(tap_strides) - 1:
            raise ValueError(
                f"{len(cfg.channels_2d)} 2D decoder levels for {len(tap_strides)} taps "
                f"(need taps - 1)"
            )
        self.cfg = cfg
        self.strides = list(tap_strides)
        blocks = []
        prev = tap_channels[-1]
        for i, width in enumerate(cfg.channels_2d):
            skip_ch = tap_channels[-2 - i]
            blocks.append(ResBlock(prev + skip_ch, width, groups=cfg.groups, ndim=2))
            prev = width
        self.levels = nn.ModuleList(blocks)
        self.to_bridge = nn.Conv2d(prev, TARGET_DEPTH * cfg.bridge_channels, kernel_size=1)

    def forward(self, taps):
        if len(taps) != len(self.strides):
            raise ValueError(f"expected {len(self.strides)} taps, got {len(taps)}")
        x = taps[-1]
        for i, block in enumerate(self.levels):
            ratio = self.strides[-1 - i] // self.strides[-2 - i]
            x = _up2d(x, ratio, self.cfg.upsample)
            x = block(torch.cat([x, taps[-2 - i]], dim=1))
        x = _up2d(x, self.strides[0], self.cfg.upsample)
        return self.to_bridge(x)


class Decoder3D(nn.Module):
    def __init__(self, shrink: ShrinkConfig, cfg: DecoderConfig):
        super().__init__()
        n = len(shrink.factors)
        if len(cfg.channels_3d) != n:
            raise ValueError(f"{len(cfg.channels_3d)} 3D decoder levels for {n} shrink stages")
        self.cfg = cfg
        self.factors = list(reversed(shrink.factors))
        skip_channels = list(reversed(shrink.channels))
        blocks = []
        prev = cfg.bridge_channels
        for width, skip_ch in zip(cfg.channels_3d, skip_channels):
            blocks.append(ResBlock(prev + skip_ch, width, groups=cfg.groups, ndim=3))
            prev = width
        self.levels = nn.ModuleList(blocks)
        # full-resolution refinement after the last depth upsampling
        self.refine = ResBlock(prev, prev, groups=_groups_for(prev, cfg.groups), ndim=3)
        self.head = nn.Conv3d(prev, 3, kernel_size=1)

    def forward(self, feat2d, skips):
        if len(skips) != len(self.levels):
            raise ValueError(f"expected {len(self.levels)} skips, got {len(skips)}")
        x = channels_to_depth(feat2d, TARGET_DEPTH)
        for block, factor, skip in zip(self.levels, self.factors, reversed(skips)):
            if skip.shape[-3:] != x.shape[-3:]:
                raise ValueError(
                    f"skip spatial shape {tuple(skip.shape[-3:])} does not match "
                    f"decoder state {tuple(x.shape[-3:])}"
                )
            x = block(torch.cat([x, skip], dim=1))
            x = _up_depth(x, factor, self.cfg.upsample)
        return self.head(self.refine(x))


def _groups_for(channels, groups):
    return groups if channels % groups == 0 else 1


class DimShrinkNet(nn.Module):
    """Shrink encoder -> 2D backbone -> 2D decoder -> 3D decoder."""

    def __init__(self, encoder, backbone, shrink: ShrinkConfig, decoder: DecoderConfig,
                 freeze_backbone: bool = False):
        super().__init__()
        self.encoder = encoder
        self.backbone = backbone
        self.decoder2d = Decoder2D(backbone.taps.strides, backbone.taps.channels, decoder)
        self.decoder3d = Decoder3D(shrink, decoder)
        self.freeze_backbone = freeze_backbone
        if freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_backbone:
            # frozen backbone keeps its normalization statistics too
            self.backbone.eval()
        return self

    def encode(self, x):
        image, skips = shrink_forward(self.encoder, x)
        return image, skips

    def logits(self, x):
        image, skips = self.encode(x)
        taps = backbone_forward(self.backbone, image)
        feat = self.decoder2d(taps)
        return self.decoder3d(feat, skips)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def build_model(shrink: ShrinkConfig, decoder: DecoderConfig, backbone: str = "efficientnet-b0",
                seed: int = 0, weights=None, freeze_backbone: bool = False) -> DimShrinkNet:
    encoder = build_shrink_encoder(shrink, seed)
    net = build_backbone(backbone, seed + 1)
    if weights:
        load_pretrained(net, weights)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 2)
        return DimShrinkNet(encoder, net, shrink, decoder, freeze_backbone=freeze_backbone)


def decode2d(decoder: Decoder2D, taps) -> torch.Tensor:
    return decoder(taps)


def decode3d(decoder: Decoder3D, feat2d, skips) -> torch.Tensor:
    """Returns (N, 3, W, H, D) probabilities in WT, TC, ET channel order."""
    return torch.sigmoid(decoder(feat2d, skips))


@torch.no_grad()
def segment(model: DimShrinkNet, vol) -> np.ndarray:
    """Probabilities for one preprocessed volume as a (3, W, H, D) float32 array."""
    was_training = model.training
    model.eval()
    try:
        x = as_volume_tensor(vol, dtype=next(model.parameters()).dtype)
        probs = model(x)[0]
    finally:
        model.train(was_training)
    return probs.float().cpu().numpy()
