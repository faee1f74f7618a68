"""PNG rendering: tri-planar views with label overlays and min-max scaled
feature channels."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# enhancing yellow, necrosis / non-enhancing core red, edema green
LABEL_COLORS = {4: (255, 255, 0), 1: (255, 0, 0), 2: (0, 255, 0)}
OVERLAY_ALPHA = 0.5
VIEWS = ("axial", "coronal", "sagittal")


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round((img - lo) / (hi - lo) * 255).astype(np.uint8)


def resolve_slices(shape, slices=None) -> tuple[int, int, int]:
    """Per-axis slice index; missing or out-of-range entries use the center."""
    slices = list(slices) if slices is not None else [None] * 3
    out = []
    for n, s in zip(shape, slices + [None] * (3 - len(slices))):
        out.append(int(s) if s is not None and 0 <= int(s) < n else n // 2)
    return tuple(out)


def planes(arr: np.ndarray, slices) -> dict[str, np.ndarray]:
    """2D planes of a (W, H, D) array, transposed so rows run along H / D."""
    x, y, z = slices
    return {
        "axial": arr[:, :, z].T,
        "coronal": arr[:, y, :].T[::-1],
        "sagittal": arr[x, :, :].T[::-1],
    }


def overlay(gray: np.ndarray, labels: np.ndarray | None) -> np.ndarray:
    rgb = np.repeat(to_uint8(gray)[..., None], 3, axis=-1).astype(np.float64)
    if labels is not None:
        for value, color in LABEL_COLORS.items():
            sel = labels == value
            rgb[sel] = (1 - OVERLAY_ALPHA) * rgb[sel] + OVERLAY_ALPHA * np.asarray(color)
    return np.round(rgb).astype(np.uint8)


def write_triplanar(volume: np.ndarray, out_dir, labels=None, slices=None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = resolve_slices(volume.shape, slices)
    vol_planes = planes(volume, idx)
    lab_planes = planes(labels, idx) if labels is not None else {}
    paths = []
    for view in VIEWS:
        path = out_dir / f"{view}.png"
        Image.fromarray(overlay(vol_planes[view], lab_planes.get(view))).save(path)
        paths.append(path)
    return paths


def write_channels(image: np.ndarray, out_dir, prefix="compressed") -> list[Path]:
    """One grayscale PNG per channel of a (C, W, H) array."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, channel in enumerate(image):
        path = out_dir / f"{prefix}_{c}.png"
        Image.fromarray(to_uint8(channel.T)).save(path)
        paths.append(path)
    return paths
