"""Kernel-density slice sampling: reduce a scan to eight representative slices.

A Gaussian KDE (Scott's rule bandwidth) is fitted over per-slice lung areas.
Its CDF is split into eight equal percentile intervals; for each interval
midpoint the slice whose area is nearest to the inverted target is selected.
Duplicates are removed and the tail is padded by repeating the last chosen
slice, so the result always has exactly eight entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .imaging import ImagingConfig, extract_lung, lung_mask, normalize_volume
from .scanio import ScanVolume

N_SELECT = 8
GRID_POINTS = 512
GRID_PAD_BW = 4.0


class DegenerateAreasError(ValueError):
    """All areas are (numerically) identical; the KDE bandwidth collapses."""


@dataclass
class AreaProfile:
    """Per-usable-slice lung areas, in slice order, with original indices."""

    areas: np.ndarray
    slice_indices: np.ndarray

    def __post_init__(self):
        self.areas = np.asarray(self.areas, dtype=np.float64)
        self.slice_indices = np.asarray(self.slice_indices, dtype=np.int64)
        if self.areas.shape != self.slice_indices.shape:
            raise ValueError("areas and slice_indices must have equal length")
        if len(self.areas) < 5:
            raise ValueError(f"profile needs >= 5 usable slices, got {len(self.areas)}")


@dataclass
class KdeModel:
    centers: np.ndarray
    bandwidth: float
    grid: np.ndarray
    cdf: np.ndarray


@dataclass
class SliceBundle:
    """Exactly eight processed slices plus their original indices."""

    images: list[np.ndarray]
    chosen_indices: list[int]

    def __post_init__(self):
        if len(self.images) != N_SELECT or len(self.chosen_indices) != N_SELECT:
            raise ValueError("a bundle holds exactly eight slices")


def scott_bandwidth(areas: np.ndarray) -> float:
    """Scott's rule: h = sample std (ddof=1) * n^(-1/5).

    Raises ValueError for n < 2 and DegenerateAreasError when the spread is
    numerically zero (caller falls back to uniform index selection).
    """
    areas = np.asarray(areas, dtype=np.float64)
    n = len(areas)
    if n < 2:
        raise ValueError("insufficient slices for bandwidth estimation (need n >= 2)")
    sigma = float(areas.std(ddof=1))
    eps = 1e-9 * max(1.0, float(areas.mean()))
    if sigma < eps:
        raise DegenerateAreasError("constant area profile")
    return sigma * n ** (-1.0 / 5.0)


def kde_cdf(areas: np.ndarray, bandwidth: float, n_grid: int = GRID_POINTS) -> KdeModel:
    """Gaussian-mixture CDF evaluated on a uniform grid.

    cdf(a) = mean_i Phi((a - a_i) / h), on n_grid points spanning
    [min - 4h, max + 4h]. The closed form avoids numerical integration.
    """
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    areas = np.asarray(areas, dtype=np.float64)
    lo = areas.min() - GRID_PAD_BW * bandwidth
    hi = areas.max() + GRID_PAD_BW * bandwidth
    grid = np.linspace(lo, hi, n_grid)
    cdf = ndtr((grid[:, None] - areas[None, :]) / bandwidth).mean(axis=1)
    return KdeModel(centers=areas.copy(), bandwidth=bandwidth, grid=grid, cdf=cdf)


def kde_density(model: KdeModel, points: np.ndarray) -> np.ndarray:
    """Mixture density at arbitrary points (used by diagnostics and tests)."""
    z = (points[:, None] - model.centers[None, :]) / model.bandwidth
    n = len(model.centers)
    return np.exp(-0.5 * z * z).sum(axis=1) / (n * model.bandwidth * np.sqrt(2.0 * np.pi))


def _dedup_pad(indices: list[int]) -> list[int]:
    ordered = sorted(set(indices))
    while len(ordered) < N_SELECT:
        ordered.append(ordered[-1])
    return ordered[:N_SELECT]


def kds_select(profile: AreaProfile, n_grid: int = GRID_POINTS) -> list[int]:
    """Pick eight original slice indices for the profile.

    Non-degenerate path: invert the KDE CDF at percentile midpoints
    (k + 0.5)/8 by linear interpolation and take the slice with the nearest
    area (ties to the lower original index). Degenerate (constant-area)
    path: positions floor((k + 0.5) * n / 8) in the usable-slice list.
    """
    n = len(profile.areas)
    targets = (np.arange(N_SELECT) + 0.5) / N_SELECT
    try:
        h = scott_bandwidth(profile.areas)
    except DegenerateAreasError:
        positions = np.floor(targets * n).astype(int)
        picks = [int(profile.slice_indices[p]) for p in positions]
        return _dedup_pad(picks)
    model = kde_cdf(profile.areas, h, n_grid=n_grid)
    target_areas = np.interp(targets, model.cdf, model.grid)
    picks = []
    for a_k in target_areas:
        pos = int(np.argmin(np.abs(profile.areas - a_k)))
        picks.append(int(profile.slice_indices[pos]))
    return _dedup_pad(picks)


def area_profile(volume: ScanVolume, config: ImagingConfig) -> AreaProfile:
    """Compute the usable-slice lung-area profile of a scan."""
    slices = normalize_volume(volume)
    areas = np.array([int(lung_mask(s, config.threshold).sum()) for s in slices])
    usable = np.flatnonzero(areas > 0)
    return AreaProfile(areas=areas[usable].astype(np.float64), slice_indices=usable)


def bundle(volume: ScanVolume, chosen_indices: list[int], config: ImagingConfig) -> SliceBundle:
    """Extract the chosen slices in non-decreasing original-index order."""
    ordered = sorted(chosen_indices)
    slices = normalize_volume(volume)
    images = [extract_lung(slices[i], config.threshold, config.target).image for i in ordered]
    return SliceBundle(images=images, chosen_indices=ordered)


def preprocess_scan(volume: ScanVolume, config: ImagingConfig) -> SliceBundle:
    """Full per-scan pipeline: area profile -> KDS selection -> bundle."""
    profile = area_profile(volume, config)
    return bundle(volume, kds_select(profile), config)
