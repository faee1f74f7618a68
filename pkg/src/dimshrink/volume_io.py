"""NIfTI ingestion, cropping, normalization and BraTS label conversion.

Arrays keep the on-disk axis order (W, H, D). Label maps are plain integer
arrays holding the BraTS values {0, 1, 2, 4}; nested masks split them into
the whole tumor / tumor core / enhancing tumor channels.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import nibabel as nib
import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Modality",
    "Volume",
    "NestedMask",
    "VolumeIOError",
    "HeaderError",
    "DimensionError",
    "LabelError",
    "GeometryError",
    "NormalizationError",
    "VALID_LABELS",
    "load_volume",
    "load_labels",
    "save_volume",
    "save_labels",
    "center_crop",
    "crop_array",
    "zscore_normalize",
    "check_labels",
    "labels_to_nested",
    "nested_to_labels",
    "uncrop",
]

VALID_LABELS = (0, 1, 2, 4)
NECROSIS, EDEMA, ENHANCING = 1, 2, 4


class VolumeIOError(Exception):
    """Base class for volume ingestion failures."""


class HeaderError(VolumeIOError):
    """The file exists but its NIfTI header or payload cannot be read."""


class DimensionError(VolumeIOError):
    """The payload is not a 3D scalar image."""


class LabelError(ValueError):
    """A label map holds values outside {0, 1, 2, 4}."""


class GeometryError(ValueError):
    """Crop or placement geometry does not fit the grid."""


class NormalizationError(ValueError):
    """Intensity statistics are degenerate (e.g. constant volume)."""


class Modality(str, enum.Enum):
    T1 = "t1"
    T1GD = "t1ce"
    T2 = "t2"
    FLAIR = "flair"

    @classmethod
    def parse(cls, value: "str | Modality") -> "Modality":
        if isinstance(value, Modality):
            return value
        key = str(value).strip().lower()
        aliases = {"t1gd": "t1ce", "t1c": "t1ce", "t2-flair": "flair", "t2flair": "flair"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown modality {value!r}; expected one of {[m.value for m in cls]}"
            ) from None


@dataclass
class Volume:
    """A single-modality 3D scalar image plus its crop provenance."""

    data: np.ndarray
    modality: Modality | None = None
    origin_dims: tuple[int, int, int] | None = None
    crop_offset: tuple[int, int, int] = (0, 0, 0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    source: str | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"volume must be 3D, got shape {self.data.shape}")
        if self.origin_dims is None:
            self.origin_dims = tuple(int(s) for s in self.data.shape)
        for o, n, n0 in zip(self.crop_offset, self.data.shape, self.origin_dims):
            if not 0 <= o <= n0 - n:
                raise GeometryError(
                    f"crop offset {self.crop_offset} incompatible with shape "
                    f"{self.data.shape} inside {self.origin_dims}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)


@dataclass
class NestedMask:
    """Binary WT/TC/ET channels; ET is inside TC which is inside WT."""

    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        if not (self.wt.shape == self.tc.shape == self.et.shape):
            raise GeometryError("nested channels must share one shape")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.wt.shape)

    def as_array(self, dtype=np.float32) -> np.ndarray:
        """Stack to a (3, W, H, D) array in WT, TC, ET order."""
        return np.stack([self.wt, self.tc, self.et]).astype(dtype)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "NestedMask":
        arr = np.asarray(arr).astype(bool)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise GeometryError(f"expected (3, W, H, D) array, got {arr.shape}")
        return cls(wt=arr[0], tc=arr[1], et=arr[2])

    def is_nested(self) -> bool:
        wt, tc, et = (np.asarray(c, dtype=bool) for c in (self.wt, self.tc, self.et))
        return bool(np.all(tc <= wt) and np.all(et <= tc))


def _read_nifti(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume: {path}")
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
    except FileNotFoundError:
        raise
    except Exception as exc:  # nibabel raises a zoo of types for corrupt files
        raise HeaderError(f"cannot read NIfTI file {path}: {exc}") from exc
    # Tolerate trailing singleton axes such as (W, H, D, 1).
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise DimensionError(f"{path} holds a {data.ndim}D payload {data.shape}, expected 3D")
    return data, np.asarray(img.affine, dtype=np.float64)


def load_volume(path: str | Path, modality: "Modality | str | None" = None) -> Volume:
    """Read a ``.nii``/``.nii.gz`` scalar volume without normalizing it.

    Non-finite voxels are replaced by zero so downstream statistics stay finite.

    Raises:
        FileNotFoundError: the path does not exist.
        HeaderError: the file is truncated or not NIfTI.
        DimensionError: the payload is not 3D.
    """
    data, affine = _read_nifti(path)
    data = data.astype(np.float32, copy=False)
    bad = ~np.isfinite(data)
    if bad.any():
        logger.warning("%s: replacing %d non-finite voxels with 0", path, int(bad.sum()))
        data = np.where(bad, 0.0, data).astype(np.float32)
    return Volume(
        data=np.ascontiguousarray(data),
        modality=Modality.parse(modality) if modality is not None else None,
        affine=affine,
        source=str(path),
    )


def load_labels(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a label map; returns ``(labels, affine)`` with labels as uint8."""
    data, affine = _read_nifti(path)
    if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
        raise LabelError(f"{path}: label map holds non-integer values")
    labels = data.astype(np.int64)
    check_labels(labels)
    return labels.astype(np.uint8), affine


def save_volume(vol: Volume | np.ndarray, path: str | Path, affine: np.ndarray | None = None) -> None:
    if isinstance(vol, Volume):
        data, affine = vol.data, vol.affine if affine is None else affine
    else:
        data = vol
    affine = np.eye(4) if affine is None else affine
    img = nib.Nifti1Image(np.asarray(data, dtype=np.float32), affine)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))


def save_labels(labels: np.ndarray, path: str | Path, affine: np.ndarray | None = None) -> None:
    """Write a label map as unsigned 8-bit NIfTI."""
    check_labels(labels)
    img = nib.Nifti1Image(np.asarray(labels, dtype=np.uint8), np.eye(4) if affine is None else affine)
    img.set_data_dtype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))


def _crop_offset(shape, target) -> tuple[int, int, int]:
    if len(target) != 3:
        raise GeometryError(f"crop target must have 3 dims, got {target}")
    for n, t in zip(shape, target):
        if t < 1 or t > n:
            raise GeometryError(f"crop target {tuple(target)} exceeds volume dims {tuple(shape)}")
    # floor for odd differences: 155 -> 108 leaves 23 before, 24 after
    return tuple((int(n) - int(t)) // 2 for n, t in zip(shape, target))


def crop_array(arr: np.ndarray, target) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Center-crop any 3D array; returns the crop and its offset."""
    offset = _crop_offset(arr.shape, target)
    sl = tuple(slice(o, o + int(t)) for o, t in zip(offset, target))
    return np.ascontiguousarray(arr[sl]), offset


def _shift_affine(affine: np.ndarray, offset) -> np.ndarray:
    shifted = np.array(affine, dtype=np.float64, copy=True)
    shifted[:3, 3] = affine[:3, :3] @ np.asarray(offset, dtype=np.float64) + affine[:3, 3]
    return shifted


def center_crop(vol: Volume, target) -> Volume:
    """Crop ``vol`` around its center to ``target`` = (W, H, D).

    The crop offset accumulates onto any offset the volume already carries, so
    ``origin_dims``/``crop_offset`` always refer to the original acquisition grid.
    """
    data, offset = crop_array(vol.data, target)
    total = tuple(a + b for a, b in zip(vol.crop_offset, offset))
    return replace(
        vol,
        data=data,
        crop_offset=total,
        affine=_shift_affine(vol.affine, offset),
    )


def zscore_normalize(vol: Volume, mask: np.ndarray | bool | None = None) -> Volume:
    """Shift/scale intensities to zero mean and unit variance.

    Statistics come from the whole volume by default. With ``mask=True`` only
    nonzero voxels are used (a crude brain mask) and background is set to 0;
    an explicit boolean array may also be passed.
    """
    x = np.asarray(vol.data, dtype=np.float64)
    if mask is True:
        region = x != 0
    elif mask is None or mask is False:
        region = None
    else:
        region = np.asarray(mask, dtype=bool)
        if region.shape != x.shape:
            raise GeometryError(f"mask shape {region.shape} != volume shape {x.shape}")
    values = x if region is None else x[region]
    if values.size < 2:
        raise NormalizationError("normalization region holds fewer than two voxels")
    mu = values.mean()
    sigma = values.std()
    if not sigma > 0 or not np.isfinite(sigma):
        raise NormalizationError("cannot normalize a constant volume (zero variance)")
    out = (x - mu) / sigma
    if region is not None:
        out = np.where(region, out, 0.0)
    return replace(vol, data=out.astype(np.float32))


def check_labels(labels: np.ndarray) -> None:
    present = np.unique(np.asarray(labels))
    bad = np.setdiff1d(present, VALID_LABELS)
    if bad.size:
        raise LabelError(f"unexpected label values {bad.tolist()}; allowed {list(VALID_LABELS)}")


def labels_to_nested(labels: np.ndarray) -> NestedMask:
    """Split a BraTS label map into nested WT/TC/ET binary channels."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise GeometryError(f"label map must be 3D, got {labels.shape}")
    check_labels(labels)
    et = labels == ENHANCING
    tc = et | (labels == NECROSIS)
    wt = tc | (labels == EDEMA)
    return NestedMask(wt=wt, tc=tc, et=et)


def nested_to_labels(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Collapse (3, W, H, D) WT/TC/ET probabilities into a BraTS label map.

    Each channel is binarized with ``p >= threshold``. The innermost set channel
    wins, so inconsistent patterns resolve as::

        (wt, tc, et)  label
        (0, 0, 0)     0
        (1, 0, 0)     2
        (0, 1, 0)     1
        (1, 1, 0)     1
        (*, *, 1)     4
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[0] != 3:
        raise GeometryError(f"expected (3, W, H, D) probabilities, got {probs.shape}")
    if probs.size and (np.nanmin(probs) < 0 or np.nanmax(probs) > 1 or np.isnan(probs).any()):
        raise ValueError("probabilities must lie in [0, 1]")
    wt, tc, et = (probs[i] >= threshold for i in range(3))
    labels = np.zeros(probs.shape[1:], dtype=np.uint8)
    labels[wt] = EDEMA
    labels[tc] = NECROSIS
    labels[et] = ENHANCING
    return labels


def uncrop(labels: np.ndarray, offset, orig) -> np.ndarray:
    """Place a cropped label block back on the zero-filled original grid."""
    labels = np.asarray(labels)
    if labels.ndim != 3 or len(offset) != 3 or len(orig) != 3:
        raise GeometryError("uncrop needs a 3D block, 3D offset and 3D original dims")
    for n, o, n0 in zip(labels.shape, offset, orig):
        if o < 0 or o + n > n0:
            raise GeometryError(
                f"block {labels.shape} at offset {tuple(offset)} does not fit in {tuple(orig)}"
            )
    out = np.zeros(tuple(int(n) for n in orig), dtype=labels.dtype)
    sl = tuple(slice(int(o), int(o) + n) for o, n in zip(offset, labels.shape))
    out[sl] = labels
    return out
