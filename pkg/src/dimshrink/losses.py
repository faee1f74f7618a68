"""Soft Dice score, the cross-entropy minus Dice training loss, hard Dice and
the mean / std / median case summary."""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .volume_io import NestedMask

__all__ = [
    "DEFAULT_EPS",
    "REGIONS",
    "LossValue",
    "CaseMetrics",
    "Summary",
    "soft_dice",
    "soft_dice_per_channel",
    "combined_loss",
    "dice_metric",
    "case_metrics",
    "aggregate",
    "format_table",
    "summary_csv",
]

DEFAULT_EPS = 1e-5
# report column order
REGIONS = ("ET", "WT", "TC")


def _as_tensor(x, like=None):
    if isinstance(x, NestedMask):
        x = x.as_array()
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
    if like is not None:
        t = t.to(dtype=like.dtype, device=like.device)
    elif not t.is_floating_point():
        t = t.double()
    return t


def soft_dice(pred, truth, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """``2 sum(t p) / (sum(t^2) + sum(p^2) + eps)`` over every element.

    A score in [0, 1] for inputs in [0, 1]; higher means more overlap.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pred = _as_tensor(pred)
    truth = _as_tensor(truth, like=pred)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    num = 2.0 * (truth * pred).sum()
    return num / ((truth * truth).sum() + (pred * pred).sum() + eps)


def soft_dice_per_channel(pred: torch.Tensor, truth: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Soft Dice for each channel of (N, C, ...) tensors, summed over batch and space."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    dims = [0] + list(range(2, pred.ndim))
    num = 2.0 * (truth * pred).sum(dim=dims)
    return num / ((truth * truth).sum(dim=dims) + (pred * pred).sum(dim=dims) + eps)


@dataclass
class LossValue:
    total: torch.Tensor
    cross_entropy: torch.Tensor
    soft_dice: torch.Tensor
    per_channel: torch.Tensor  # soft Dice per WT, TC, ET channel

    def item_dict(self) -> dict[str, float]:
        wt, tc, et = (float(v) for v in self.per_channel.detach())
        return {
            "loss_total": float(self.total.detach()),
            "loss_ce": float(self.cross_entropy.detach()),
            "dice_wt": wt,
            "dice_tc": tc,
            "dice_et": et,
        }


def combined_loss(pred, truth, eps: float = DEFAULT_EPS, from_logits: bool = False) -> LossValue:
    """Binary cross-entropy minus the channel-mean soft Dice.

    ``pred`` is (N, 3, W, H, D) or (3, W, H, D), either probabilities or, with
    ``from_logits=True``, pre-sigmoid logits. Cross-entropy is averaged over
    voxels and channels.
    """
    pred = _as_tensor(pred)
    truth = _as_tensor(truth, like=pred)
    if pred.ndim == 4:
        pred = pred[None]
    if truth.ndim == 4:
        truth = truth[None]
    if pred.shape[1] != 3:
        raise ValueError(f"expected 3 prediction channels, got {pred.shape[1]}")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if from_logits:
        ce = F.binary_cross_entropy_with_logits(pred, truth)
        probs = torch.sigmoid(pred)
    else:
        if pred.min() < 0 or pred.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        ce = F.binary_cross_entropy(pred, truth)
        probs = pred
    per_channel = soft_dice_per_channel(probs, truth, eps)
    dice = per_channel.mean()
    return LossValue(total=ce - dice, cross_entropy=ce, soft_dice=dice, per_channel=per_channel)


def dice_metric(pred, truth) -> float:
    """Hard Dice ``2|P & T| / (|P| + |T|)``; 1.0 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    denom = int(pred.sum()) + int(truth.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / denom


@dataclass
class CaseMetrics:
    case_id: str
    et: float
    wt: float
    tc: float

    def region(self, name: str) -> float:
        return getattr(self, name.lower())


def case_metrics(case_id: str, pred: NestedMask, truth: NestedMask) -> CaseMetrics:
    return CaseMetrics(
        case_id=case_id,
        et=dice_metric(pred.et, truth.et),
        wt=dice_metric(pred.wt, truth.wt),
        tc=dice_metric(pred.tc, truth.tc),
    )


@dataclass
class Summary:
    n_cases: int
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    median: dict[str, float] = field(default_factory=dict)

    def rows(self):
        return [("Mean", self.mean), ("StdDev", self.std), ("Median", self.median)]


def aggregate(cases: list[CaseMetrics]) -> Summary:
    """Per-region mean, population standard deviation and median."""
    if not cases:
        raise ValueError("cannot aggregate an empty case list")
    summary = Summary(n_cases=len(cases))
    for region in REGIONS:
        values = [c.region(region) for c in cases]
        summary.mean[region] = math.fsum(values) / len(values)
        summary.std[region] = statistics.pstdev(values)
        summary.median[region] = statistics.median(values)
    return summary


def format_table(summary: Summary, percent: bool = True) -> str:
    """Aligned text table: Mean/StdDev/Median rows, ET WT TC Dice columns."""
    scale = 100.0 if percent else 1.0
    lines = [f"{'':<8}{'Dice':^24}", f"{'':<8}" + "".join(f"{r:>8}" for r in REGIONS)]
    for label, values in summary.rows():
        lines.append(f"{label:<8}" + "".join(f"{values[r] * scale:>8.2f}" for r in REGIONS))
    return "\n".join(lines) + "\n"


def summary_csv(summary: Summary) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["statistic", *REGIONS])
    for label, values in summary.rows():
        writer.writerow([label, *(repr(values[r]) for r in REGIONS)])
    return buf.getvalue()
