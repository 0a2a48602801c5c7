"""First-stage slice pipeline: lung isolation, validity checks, crop, resize.

Slices are 2D float64 arrays with values in [0, 1]; lungs are darker than
surrounding tissue, so the binary mask selects pixels strictly below the
threshold. Hole filling uses 4-connectivity for the background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .scanio import ScanVolume

VOXEL_MAX = 65535.0


@dataclass(frozen=True)
class ImagingConfig:
    """Lung-extraction knobs.

    threshold: normalized intensity below which a pixel counts as lung.
    target: output resolution (target x target). 64 is the desk-scale
    default; 256 matches the full-scale protocol.
    """

    threshold: float = 0.35
    target: int = 64

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.target < 1:
            raise ValueError(f"target resolution must be positive, got {self.target}")

    def cache_token(self) -> str:
        return f"imaging-v1|threshold={self.threshold!r}|target={self.target}"


@dataclass
class ProcessedSlice:
    """A slice after lung extraction: cropped+resized image and the mask size.

    lung_area is the mask pixel count at the original resolution.
    """

    image: np.ndarray
    lung_area: int


@dataclass
class ValidationResult:
    accepted: bool
    usable_indices: list[int]
    reason: str | None = None


def normalize_volume(volume: ScanVolume) -> np.ndarray:
    """uint16 voxels to float64 slices in [0, 1]."""
    return volume.voxels.astype(np.float64) / VOXEL_MAX


def min_filter3(slice_: np.ndarray) -> np.ndarray:
    """3x3 minimum filter with replicate border padding."""
    return ndimage.minimum_filter(slice_, size=3, mode="nearest")


def binarize(slice_: np.ndarray, threshold: float) -> np.ndarray:
    """1 where pixel < threshold (strict), else 0."""
    return (slice_ < threshold).astype(np.uint8)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Set every 0-pixel not 4-connected to the border through 0-pixels to 1."""
    return ndimage.binary_fill_holes(mask.astype(bool)).astype(np.uint8)


def lung_mask(slice_: np.ndarray, threshold: float) -> np.ndarray:
    """min_filter3 -> binarize -> fill_holes."""
    return fill_holes(binarize(min_filter3(slice_), threshold))


def lung_masks_volume(slices: np.ndarray, threshold: float) -> np.ndarray:
    """Per-slice lung masks for a (depth, h, w) stack.

    Equivalent to stacking lung_mask over slices; the minimum filter runs
    on the whole stack at once (its footprint never crosses slices).
    """
    filtered = ndimage.minimum_filter(slices, size=(1, 3, 3), mode="nearest")
    binary = filtered < threshold
    return np.stack([ndimage.binary_fill_holes(b) for b in binary]).astype(np.uint8)


def resize_bilinear(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel (i, j) samples the input at (i*(h-1)/(th-1), j*(w-1)/(tw-1));
    a singleton output axis samples the input center.
    """
    h, w = image.shape

    def coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1:
            return np.array([(n_in - 1) / 2.0])
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    ys = coords(h, target_h)
    xs = coords(w, target_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def usable_by_lung_area(threshold: float) -> Callable[[np.ndarray], bool]:
    """Default usability predicate: the slice has a nonempty lung mask."""

    def usable(slice_: np.ndarray) -> bool:
        return bool(lung_mask(slice_, threshold).any())

    return usable


def validate_scan(
    scan: ScanVolume | Sequence[np.ndarray],
    usable: Callable[[np.ndarray], bool] | None = None,
    threshold: float = 0.35,
) -> ValidationResult:
    """Accept a scan if its slices are dimension-consistent and >= 5 are usable.

    Accepts either a ScanVolume (dimension consistency holds by construction)
    or an externally supplied sequence of 2D arrays. Rejection is a value,
    not an error.
    """
    if isinstance(scan, ScanVolume):
        slices: Sequence[np.ndarray] = list(normalize_volume(scan))
    else:
        slices = list(scan)
        shapes = {s.shape for s in slices}
        if len(shapes) > 1:
            return ValidationResult(False, [], "dimension mismatch")
    if usable is None:
        usable = usable_by_lung_area(threshold)
    usable_indices = [i for i, s in enumerate(slices) if usable(s)]
    if len(usable_indices) < 5:
        return ValidationResult(False, usable_indices, "fewer than five usable")
    return ValidationResult(True, usable_indices)


def extract_lung(slice_: np.ndarray, threshold: float, target: int) -> ProcessedSlice:
    """Isolate the lung region of one slice and resize it to target x target.

    The mask drives a tight bounding-box crop of the original slice (the
    whole slice if the mask is empty); lung_area is counted on the
    original-resolution mask.
    """
    mask = lung_mask(slice_, threshold)
    area = int(mask.sum())
    if area > 0:
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        crop = slice_[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    else:
        crop = slice_
    image = np.clip(resize_bilinear(crop, target, target), 0.0, 1.0)
    return ProcessedSlice(image=image, lung_area=area)
