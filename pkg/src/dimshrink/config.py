"""Experiment configuration: a YAML file mapped onto :class:`TrainConfig`.

Unknown keys are rejected by name. ``key.sub=value`` overrides (as given on
the command line) are parsed with YAML scalar rules and applied before
validation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .decoder import DecoderConfig
from .shrink_encoder import ShrinkConfig
from .volume_io import Modality

__all__ = ["TrainConfig", "ConfigError", "load_config", "apply_overrides", "FULL_CROP"]

FULL_CROP = (192, 160, 108)


class ConfigError(ValueError):
    pass


@dataclass
class ShrinkSection:
    factors: tuple[int, ...] = (3, 3, 4)
    channels: tuple[int, ...] = (32, 64, 128)
    groups: int = 8

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)
        self.channels = tuple(int(c) for c in self.channels)
        self.groups = int(self.groups)


@dataclass
class TrainConfig:
    crop: tuple[int, int, int] = FULL_CROP
    shrink: ShrinkSection = field(default_factory=ShrinkSection)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    backbone: str = "efficientnet-b0"
    backbone_weights: str | None = None
    freeze_backbone: bool = False
    lr: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 50
    max_reductions: int = 2
    batch_size: int = 1
    max_epochs: int = 300
    max_steps: int | None = None
    modality: Modality = Modality.FLAIR
    seed: int = 0
    eps: float = 1e-5
    normalize_nonzero: bool = False

    def __post_init__(self):
        self.crop = tuple(int(c) for c in self.crop)
        self.modality = Modality.parse(self.modality)
        # YAML 1.1 reads "1e-4" as a string
        for name in ("lr", "plateau_factor", "eps"):
            setattr(self, name, float(getattr(self, name)))
        for name in ("plateau_patience", "max_reductions", "batch_size", "max_epochs", "seed"):
            setattr(self, name, int(getattr(self, name)))
        if self.max_steps is not None:
            self.max_steps = int(self.max_steps)

    def validate(self) -> None:
        if len(self.crop) != 3 or min(self.crop) < 1:
            raise ConfigError(f"crop must be three positive ints, got {self.crop}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor is a multiplier and must lie in (0, 1)")
        if self.plateau_patience < 1 or self.max_epochs < 1:
            raise ConfigError("plateau_patience and max_epochs must be >= 1")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        try:
            self.shrink_config().validate()
        except ValueError as exc:
            raise ConfigError(f"shrink: {exc}") from exc

    def shrink_config(self) -> ShrinkConfig:
        return ShrinkConfig(
            factors=self.shrink.factors,
            channels=self.shrink.channels,
            groups=self.shrink.groups,
            input_depth=self.crop[2],
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["modality"] = self.modality.value
        d["crop"] = list(self.crop)
        for section in ("shrink", "decoder"):
            d[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[section].items()}
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "TrainConfig":
        data = dict(data or {})
        _check_keys(data, cls, "")
        kwargs = dict(data)
        for name, sub in (("shrink", ShrinkSection), ("decoder", DecoderConfig)):
            if name in kwargs:
                section = kwargs[name] or {}
                if not isinstance(section, dict):
                    raise ConfigError(f"{name} must be a mapping")
                _check_keys(section, sub, f"{name}.")
                try:
                    kwargs[name] = sub(**section)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{name}: {exc}") from exc
        try:
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


def _check_keys(data: dict, cls, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key!r}")


def apply_overrides(data: dict[str, Any], overrides) -> dict[str, Any]:
    """Apply ``a.b=value`` strings to a nested dict (copied)."""
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (data or {}).items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    return data


def load_config(path: str | Path | None = None, overrides=()) -> TrainConfig:
    data: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return TrainConfig.from_dict(apply_overrides(data, overrides))
