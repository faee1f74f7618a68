"""Desk-scale phantoms and deliberately naive reference computations.

The oracles here loop voxel by voxel with plain floats and never import the
loss/metric code they are used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume_io import Modality, Volume

__all__ = [
    "Phantom",
    "make_phantom",
    "oracle_dice",
    "oracle_soft_dice",
    "oracle_combined_loss",
]

# piecewise-constant intensities, one contrast unit apart
BACKGROUND, EDEMA_LEVEL, CORE_LEVEL, ENHANCING_LEVEL = 0.0, 1.0, 2.0, 3.0
NOISE_SIGMA = 0.1
# radii of the core / enhancing ellipsoids relative to the outer one
CORE_SCALE = 0.65
ENHANCING_SCALE = 0.35


@dataclass
class Phantom:
    volume: Volume
    labels: np.ndarray
    seed: int
    center: tuple[float, float, float]
    radii: tuple[tuple[float, float, float], ...]  # outer, core, enhancing


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def make_phantom(seed: int, dims=(32, 32, 12), modality: Modality | str = Modality.FLAIR) -> Phantom:
    """Noisy volume with three concentric ellipsoids labelled 2 (outer), 1, 4 (inner).

    Geometry and noise are drawn from ``numpy.random.default_rng(seed)``, so
    the phantom is a pure function of ``(seed, dims)``.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"phantom dims must be three values >= 8, got {dims}")
    rng = np.random.default_rng(seed)
    center = tuple(n / 2.0 - 0.5 + rng.uniform(-0.1, 0.1) * n for n in dims)
    outer = tuple(n * rng.uniform(0.28, 0.36) for n in dims)
    core = tuple(r * CORE_SCALE for r in outer)
    enhancing = tuple(r * ENHANCING_SCALE for r in outer)

    wt = _ellipsoid(dims, center, outer)
    tc = _ellipsoid(dims, center, core)
    et = _ellipsoid(dims, center, enhancing)
    if not et.any():
        raise ValueError(f"dims {dims} too small to hold nested ellipsoids")

    labels = np.zeros(dims, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4

    intensity = np.full(dims, BACKGROUND)
    intensity[wt] = EDEMA_LEVEL
    intensity[tc] = CORE_LEVEL
    intensity[et] = ENHANCING_LEVEL
    intensity += rng.normal(0.0, NOISE_SIGMA, size=dims)

    volume = Volume(data=intensity.astype(np.float32), modality=Modality.parse(modality))
    return Phantom(volume=volume, labels=labels, seed=seed, center=center,
                   radii=(outer, core, enhancing))


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def oracle_dice(a, b) -> float:
    """Hard Dice by explicit triple loop; 1.0 if both masks are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_same_shape(a, b)
    inter = size_a = size_b = 0
    nx, ny, nz = a.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = 1 if a[i, j, k] else 0
                y = 1 if b[i, j, k] else 0
                inter += x * y
                size_a += x
                size_b += y
    if size_a + size_b == 0:
        return 1.0
    return 2.0 * inter / (size_a + size_b)


def oracle_soft_dice(pred, truth, eps: float) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_same_shape(pred, truth)
    num = sq_t = sq_p = 0.0
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        num += t * p
        sq_t += t * t
        sq_p += p * p
    return 2.0 * num / (sq_t + sq_p + eps)


def oracle_combined_loss(pred, truth, eps: float) -> tuple[float, float, float]:
    """(total, cross_entropy, mean soft Dice) for (3, W, H, D) probabilities."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_same_shape(pred, truth)
    ce_sum = 0.0
    count = 0
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        log_p = max(math.log(p), -100.0) if p > 0 else -100.0
        log_q = max(math.log(1.0 - p), -100.0) if p < 1 else -100.0
        ce_sum += -(t * log_p + (1.0 - t) * log_q)
        count += 1
    ce = ce_sum / count
    dice = sum(oracle_soft_dice(pred[c], truth[c], eps) for c in range(pred.shape[0])) / pred.shape[0]
    return ce - dice, ce, dice
