"""Per-modality training loop, checkpoints and the four-model ensemble."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .decoder import DimShrinkNet, build_model, segment
from .losses import combined_loss
from .volume_io import Modality, NestedMask, Volume

logger = logging.getLogger(__name__)

__all__ = [
    "FORMAT_VERSION",
    "LOG_COLUMNS",
    "PlateauSchedule",
    "NonFiniteLossError",
    "train",
    "build_from_config",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "ensemble_predict",
]

FORMAT_VERSION = 1
LOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_ce", "dice_wt", "dice_tc", "dice_et")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` once the loss has gone
    ``patience`` consecutive epochs without a strict decrease."""

    lr: float
    factor: float = 0.1
    patience: int = 50
    best: float = math.inf
    stagnant: int = 0
    reductions: int = 0

    def step(self, loss: float) -> bool:
        """Record one epoch's loss; returns True if the rate was just reduced."""
        if loss < self.best:
            self.best = loss
            self.stagnant = 0
            return False
        self.stagnant += 1
        if self.stagnant >= self.patience:
            self.lr *= self.factor
            self.stagnant = 0
            self.reductions += 1
            return True
        return False

    def state_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "factor", "patience", "best", "stagnant", "reductions")}

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            setattr(self, k, v)


def build_from_config(cfg: TrainConfig) -> DimShrinkNet:
    return build_model(
        cfg.shrink_config(),
        cfg.decoder,
        backbone=cfg.backbone,
        seed=cfg.seed,
        weights=cfg.backbone_weights,
        freeze_backbone=cfg.freeze_backbone,
    )


def _case_tensors(dataset, crop):
    xs, ys, names = [], [], []
    for i, (vol, mask) in enumerate(dataset):
        data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
        target = mask.as_array() if isinstance(mask, NestedMask) else np.asarray(mask, dtype=np.float32)
        if tuple(data.shape) != tuple(crop):
            raise ValueError(f"case {i} has shape {data.shape}, expected crop {tuple(crop)}")
        if target.shape != (3, *crop):
            raise ValueError(f"case {i} mask has shape {target.shape}")
        xs.append(torch.as_tensor(np.asarray(data, dtype=np.float32))[None])
        ys.append(torch.as_tensor(target.astype(np.float32)))
        names.append(getattr(vol, "source", None) or f"case {i}")
    return xs, ys, names


def train(
    cfg: TrainConfig,
    dataset: Sequence[tuple[Volume, NestedMask]],
    log_path: str | Path | None = None,
    resume: dict | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> dict:
    """Fit one network with Adam and the plateau schedule; returns a checkpoint.

    Each epoch visits every case once in a seed-determined order, in batches of
    ``cfg.batch_size``. The returned checkpoint holds the parameters of the
    epoch with the lowest mean loss, plus the latest parameters and optimizer
    state so training can resume.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    cfg.validate()
    xs, ys, names = _case_tensors(dataset, cfg.crop)

    torch.manual_seed(cfg.seed)
    model = build_from_config(cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    schedule = PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    start_epoch, steps = 0, 0
    best_state, best_epoch = None, None
    if resume is not None:
        model.load_state_dict(resume["last_model"])
        optimizer.load_state_dict(resume["optimizer"])
        schedule.load_state_dict(resume["scheduler"])
        start_epoch = int(resume["epoch"])
        steps = int(resume.get("steps", 0))
        best_state, best_epoch = resume["model"], resume["best_epoch"]
        torch.set_rng_state(resume["torch_rng"])

    log_file = writer = None
    if log_path is not None:
        log_path = Path(log_path)
        append = resume is not None and log_path.exists()
        log_file = open(log_path, "a" if append else "w", newline="")
        writer = csv.writer(log_file)
        if not append:
            writer.writerow(LOG_COLUMNS)

    model.train()
    epoch = start_epoch
    try:
        while epoch < cfg.max_epochs:
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            epoch += 1
            order = np.random.default_rng(cfg.seed + epoch).permutation(len(xs))
            lr_used = schedule.lr
            totals = []
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                idx = order[start:start + cfg.batch_size]
                x = torch.stack([xs[i] for i in idx])
                y = torch.stack([ys[i] for i in idx])
                optimizer.zero_grad(set_to_none=True)
                try:
                    logits = model.logits(x)
                except FloatingPointError as exc:
                    raise NonFiniteLossError(
                        f"epoch {epoch} on {[names[i] for i in idx]}: {exc}"
                    ) from exc
                loss = combined_loss(logits, y, eps=cfg.eps, from_logits=True)
                if not torch.isfinite(loss.total):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch} on {[names[i] for i in idx]}: "
                        f"ce={float(loss.cross_entropy)}, dice={float(loss.soft_dice)}"
                    )
                loss.total.backward()
                optimizer.step()
                steps += 1
                totals.append(loss.item_dict())
            if not totals:
                break
            row = {k: float(np.mean([t[k] for t in totals])) for k in totals[0]}
            row = {"epoch": epoch, "lr": lr_used, **row}
            if writer is not None:
                writer.writerow([row[c] for c in LOG_COLUMNS])
                log_file.flush()
            logger.info("epoch %d lr %.2e loss %.5f", epoch, lr_used, row["loss_total"])
            if on_epoch is not None:
                on_epoch(row)

            if row["loss_total"] < schedule.best:
                best_state = copy.deepcopy(model.state_dict())
                best_epoch = epoch
            if schedule.step(row["loss_total"]):
                if schedule.reductions > cfg.max_reductions:
                    logger.info("plateau after %d reductions; stopping", cfg.max_reductions)
                    break
                for group in optimizer.param_groups:
                    group["lr"] = schedule.lr
    finally:
        if log_file is not None:
            log_file.close()

    return {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "model": best_state if best_state is not None else copy.deepcopy(model.state_dict()),
        "last_model": copy.deepcopy(model.state_dict()),
        "optimizer": optimizer.state_dict(),
        "scheduler": schedule.state_dict(),
        "epoch": epoch,
        "steps": steps,
        "best_epoch": best_epoch,
        "best_loss": schedule.best,
        "torch_rng": torch.get_rng_state(),
    }


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    torch.save(ckpt, str(path))


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(str(path), map_location="cpu", weights_only=True)
    version = ckpt.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format version {version!r}")
    return ckpt


def model_from_checkpoint(ckpt: dict, which: str = "model") -> tuple[DimShrinkNet, TrainConfig]:
    """Rebuild the network described by the checkpoint's embedded config."""
    cfg = TrainConfig.from_dict(ckpt["config"])
    # weights come from the checkpoint, not the original pretrained file
    cfg.backbone_weights = None
    model = build_from_config(cfg)
    try:
        model.load_state_dict(ckpt[which])
    except RuntimeError as exc:
        raise ValueError(f"checkpoint does not match its declared architecture: {exc}") from exc
    model.eval()
    return model, cfg


def ensemble_predict(
    models: Mapping[Modality | str, DimShrinkNet],
    case: Mapping[Modality | str, Volume | np.ndarray],
    allow_partial: bool = False,
) -> np.ndarray:
    """Average the sigmoid outputs of one model per modality.

    Returns (3, W, H, D) float32 probabilities. With ``allow_partial`` the mean
    runs over whichever modalities have both a model and a volume.
    """
    models = {Modality.parse(k): v for k, v in models.items()}
    case = {Modality.parse(k): v for k, v in case.items()}
    available = [m for m in Modality if m in models and m in case]
    missing = [m.value for m in Modality if m not in available]
    if missing:
        if not allow_partial or not available:
            raise ValueError(f"missing modalities for ensemble: {missing}")
        logger.warning("ensemble over %d of 4 modalities; missing %s", len(available), missing)
    shapes = {tuple(np.shape(case[m].data if isinstance(case[m], Volume) else case[m])) for m in available}
    if len(shapes) != 1:
        raise ValueError(f"modality volumes differ in shape: {sorted(shapes)}")
    # float64 accumulation keeps the mean of identical float32 maps exact
    total = None
    for m in available:
        probs = segment(models[m], case[m]).astype(np.float64)
        total = probs if total is None else total + probs
    return (total / len(available)).astype(np.float32)
