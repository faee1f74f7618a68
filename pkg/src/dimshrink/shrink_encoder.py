"""Inter-slice 3D encoder that squeezes the depth axis down to three slices.

Tensors use the layout (N, C, W, H, D). Each stage keeps W and H untouched and
divides D by its factor; after the last stage a 1x1x1 convolution collapses
the channels to one, and the remaining depth of 3 becomes the channel axis of
a (N, 3, W, H) image for a 2D backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .blocks import ResBlock
from .volume_io import Volume

__all__ = [
    "ShrinkConfig",
    "ShrinkEncoder",
    "build_shrink_encoder",
    "shrink_forward",
    "depth_to_channels",
    "channels_to_depth",
    "TARGET_DEPTH",
]

TARGET_DEPTH = 3


@dataclass
class ShrinkConfig:
    factors: tuple[int, ...] = (3, 3, 4)
    channels: tuple[int, ...] = (32, 64, 128)
    groups: int = 8
    input_depth: int = 108

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self) -> None:
        if len(self.factors) != len(self.channels):
            raise ValueError(
                f"{len(self.factors)} depth factors but {len(self.channels)} channel widths"
            )
        if any(f < 1 for f in self.factors) or any(c < 1 for c in self.channels):
            raise ValueError("factors and channel widths must be positive")
        if self.groups < 1:
            raise ValueError("groups must be positive")
        total = math.prod(self.factors)
        if self.input_depth % total or self.input_depth // total != TARGET_DEPTH:
            raise ValueError(
                f"depth {self.input_depth} with factors {self.factors} does not shrink "
                f"to {TARGET_DEPTH} (product {total})"
            )
        for c in self.channels:
            if c % self.groups:
                raise ValueError(f"channel width {c} is not divisible by {self.groups} groups")

    def stage_depths(self) -> list[int]:
        depths, d = [], self.input_depth
        for f in self.factors:
            d //= f
            depths.append(d)
        return depths


class ShrinkStage(nn.Module):
    def __init__(self, in_channels, out_channels, factor, groups):
        super().__init__()
        self.block = ResBlock(in_channels, out_channels, groups=groups, ndim=3)
        self.pool = nn.MaxPool3d(kernel_size=(1, 1, factor), stride=(1, 1, factor))

    def forward(self, x):
        return self.pool(self.block(x))


class ShrinkEncoder(nn.Module):
    def __init__(self, cfg: ShrinkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = (1,) + cfg.channels
        self.stages = nn.ModuleList(
            ShrinkStage(widths[i], widths[i + 1], f, cfg.groups)
            for i, f in enumerate(cfg.factors)
        )
        self.collapse = nn.Conv3d(widths[-1], 1, kernel_size=1)

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        x = self.collapse(x)
        return depth_to_channels(x), skips


def depth_to_channels(x: torch.Tensor) -> torch.Tensor:
    """(N, 1, W, H, 3) -> (N, 3, W, H)."""
    return x[:, 0].permute(0, 3, 1, 2)


def channels_to_depth(x: torch.Tensor, depth: int = TARGET_DEPTH) -> torch.Tensor:
    """Inverse bridge: (N, depth*C, W, H) -> (N, C, W, H, depth).

    Channel index ``d * C + c`` lands on depth slice ``d``, feature ``c``.
    """
    n, ch, w, h = x.shape
    if ch % depth:
        raise ValueError(f"{ch} channels cannot be split over depth {depth}")
    return x.reshape(n, depth, ch // depth, w, h).permute(0, 2, 3, 4, 1)


def build_shrink_encoder(cfg: ShrinkConfig, seed: int = 0) -> ShrinkEncoder:
    """Construct the encoder with parameters drawn from a private RNG stream."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ShrinkEncoder(cfg)


def as_volume_tensor(vol, dtype=None) -> torch.Tensor:
    """Accept (W, H, D) arrays/tensors or (N, 1, W, H, D) tensors."""
    if isinstance(vol, Volume):
        vol = vol.data
    x = torch.as_tensor(np.asarray(vol) if not torch.is_tensor(vol) else vol)
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[1] != 1:
        raise ValueError(f"expected a single-channel volume, got shape {tuple(x.shape)}")
    if dtype is not None:
        x = x.to(dtype)
    return x


def shrink_forward(enc: ShrinkEncoder, vol) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Run the encoder; returns the (N, 3, W, H) image and per-stage skips."""
    param = next(enc.parameters())
    x = as_volume_tensor(vol, dtype=param.dtype)
    if x.shape[-1] != enc.cfg.input_depth:
        raise ValueError(
            f"input depth {x.shape[-1]} does not match configured depth {enc.cfg.input_depth}"
        )
    image, skips = enc(x)
    if not torch.isfinite(image).all() or not all(torch.isfinite(s).all() for s in skips):
        raise FloatingPointError("non-finite activations in shrink encoder")
    return image, skips
