"""Synthetic multi-source scan generator.

Each scan is a procedural chest phantom: a bright elliptical body on a
mid-gray background, two dark elliptical lungs whose cross-section swells
from the apices to a per-scan peak and shrinks again, and, for COVID scans,
bright Gaussian blobs injected strictly inside the lungs of mid-depth
slices. Per-source acquisition shift (brightness, contrast, field of view,
noise, scan length) is applied uniformly to every slice.

Intensity levels are chosen so the downstream mask threshold (0.35) cleanly
separates lungs (dark) from body and background (bright) for every default
profile, noise tails included.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import child_rng
from .scanio import ManifestRecord, ScanVolume, save_manifest, write_scan

BG_LEVEL = 0.47
BODY_LEVEL = 0.72
LUNG_LEVEL = 0.12
LUNG_SCALE_FLOOR = 0.30
LESION_BAND = (0.30, 0.70)

TABLE1_COVID_TRAIN = (165, 165, 165, 69)
TABLE1_NONCOVID_TRAIN = (163, 165, 165, 165)
TABLE1_COVID_VAL = (45, 45, 38, 0)
TABLE1_NONCOVID_VAL = (45, 45, 45, 45)


@dataclass(frozen=True)
class SourceProfile:
    """Per-source acquisition characteristics (the nuisance axes)."""

    source: int
    brightness_offset: float
    contrast_gain: float
    field_of_view: float
    noise_sigma: float
    slice_count_range: tuple[int, int]

    def __post_init__(self):
        if not -0.3 <= self.brightness_offset <= 0.3:
            raise ValueError(f"brightness_offset out of [-0.3, 0.3]: {self.brightness_offset}")
        if not 0.6 <= self.contrast_gain <= 1.6:
            raise ValueError(f"contrast_gain out of [0.6, 1.6]: {self.contrast_gain}")
        if not 0.5 < self.field_of_view <= 1.0:
            raise ValueError(f"field_of_view out of (0.5, 1.0]: {self.field_of_view}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0: {self.noise_sigma}")
        lo, hi = self.slice_count_range
        if not (5 <= lo <= hi <= 700):
            raise ValueError(f"slice_count_range must satisfy 5 <= lo <= hi <= 700: {self.slice_count_range}")


DEFAULT_PROFILES = (
    SourceProfile(0, brightness_offset=-0.06, contrast_gain=0.95, field_of_view=0.94, noise_sigma=0.008, slice_count_range=(50, 90)),
    SourceProfile(1, brightness_offset=0.00, contrast_gain=1.10, field_of_view=0.84, noise_sigma=0.012, slice_count_range=(60, 110)),
    SourceProfile(2, brightness_offset=0.06, contrast_gain=0.90, field_of_view=0.76, noise_sigma=0.016, slice_count_range=(70, 130)),
    SourceProfile(3, brightness_offset=0.12, contrast_gain=1.25, field_of_view=0.68, noise_sigma=0.020, slice_count_range=(80, 160)),
)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _scale_count(full: int, factor: float) -> int:
    if full == 0:
        return 0
    return max(2, _round_half_up(full * factor))


@dataclass(frozen=True)
class GenConfig:
    """Dataset composition. Default counts are Table-proportional at 0.1x."""

    covid_train: tuple[int, ...] = tuple(_scale_count(c, 0.1) for c in TABLE1_COVID_TRAIN)
    noncovid_train: tuple[int, ...] = tuple(_scale_count(c, 0.1) for c in TABLE1_NONCOVID_TRAIN)
    covid_val: tuple[int, ...] = tuple(_scale_count(c, 0.1) for c in TABLE1_COVID_VAL)
    noncovid_val: tuple[int, ...] = tuple(_scale_count(c, 0.1) for c in TABLE1_NONCOVID_VAL)
    resolution: int = 64
    lesion_count_range: tuple[int, int] = (1, 4)
    lesion_intensity_delta: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for counts in (self.covid_train, self.noncovid_train, self.covid_val, self.noncovid_val):
            if len(counts) != 4 or any(c < 0 for c in counts):
                raise ValueError(f"counts must be four non-negative integers, got {counts}")
        if self.resolution < 8:
            raise ValueError(f"resolution too small: {self.resolution}")
        lo, hi = self.lesion_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad lesion_count_range: {self.lesion_count_range}")
        if self.lesion_intensity_delta <= 0:
            raise ValueError("lesion_intensity_delta must be positive")

    @classmethod
    def from_table(cls, factor: float = 0.1, **kwargs) -> "GenConfig":
        return cls(
            covid_train=tuple(_scale_count(c, factor) for c in TABLE1_COVID_TRAIN),
            noncovid_train=tuple(_scale_count(c, factor) for c in TABLE1_NONCOVID_TRAIN),
            covid_val=tuple(_scale_count(c, factor) for c in TABLE1_COVID_VAL),
            noncovid_val=tuple(_scale_count(c, factor) for c in TABLE1_NONCOVID_VAL),
            **kwargs,
        )


@dataclass
class SynthMeta:
    """Generator ground truth, used by oracles and tests only."""

    clean: np.ndarray
    lung_mask: np.ndarray
    lung_pixel_counts: np.ndarray
    n_blobs: int


def _depth_scale(depth: int, peak: float) -> np.ndarray:
    # Lung cross-section grows from the apex to the (per-scan) peak slice and
    # shrinks again; C1-smooth, never collapses below LUNG_SCALE_FLOOR.
    t = (np.arange(depth) + 0.5) / depth
    s = np.where(
        t <= peak,
        np.sin(0.5 * np.pi * t / peak),
        np.cos(0.5 * np.pi * (t - peak) / (1.0 - peak)),
    )
    return LUNG_SCALE_FLOOR + (1.0 - LUNG_SCALE_FLOOR) * s


def _render_clean(
    profile: SourceProfile,
    label: int,
    rng: np.random.Generator,
    resolution: int,
    lesion_count_range: tuple[int, int],
    lesion_delta: float,
) -> tuple[np.ndarray, SynthMeta]:
    w = resolution
    lo, hi = profile.slice_count_range
    depth = int(rng.integers(lo, hi + 1))

    cx = w * (0.5 + rng.uniform(-0.02, 0.02))
    cy = w * (0.5 + rng.uniform(-0.02, 0.02))
    body_a = 0.46 * profile.field_of_view * w
    body_b = 0.38 * profile.field_of_view * w
    sep = rng.uniform(0.46, 0.54) * body_a
    lung_sx = rng.uniform(0.27, 0.33) * body_a
    lung_sy = rng.uniform(0.60, 0.72) * body_b
    lung_cy = cy + rng.uniform(-0.03, 0.03) * body_b
    peak = rng.uniform(0.42, 0.58)
    scale = _depth_scale(depth, peak)

    ys, xs = np.mgrid[0:w, 0:w].astype(np.float64)
    body = ((xs - cx) / body_a) ** 2 + ((ys - cy) / body_b) ** 2 <= 1.0

    sx_z = (lung_sx * scale)[:, None, None]
    sy_z = (lung_sy * scale)[:, None, None]
    left = ((xs[None] - (cx - sep)) / sx_z) ** 2 + ((ys[None] - lung_cy) / sy_z) ** 2 <= 1.0
    right = ((xs[None] - (cx + sep)) / sx_z) ** 2 + ((ys[None] - lung_cy) / sy_z) ** 2 <= 1.0
    lung = left | right

    clean = np.full((depth, w, w), BG_LEVEL)
    clean[:, body] = BODY_LEVEL
    clean[lung] = LUNG_LEVEL

    n_blobs = 0
    if label == 1:
        t = (np.arange(depth) + 0.5) / depth
        band = np.flatnonzero((t >= LESION_BAND[0]) & (t < LESION_BAND[1]))
        klo, khi = lesion_count_range
        for z in band:
            k = int(rng.integers(klo, khi + 1))
            for _ in range(k):
                side = -1.0 if rng.random() < 0.5 else 1.0
                radius = 0.55 * np.sqrt(rng.random())
                theta = rng.uniform(0.0, 2.0 * np.pi)
                sx = lung_sx * scale[z]
                sy = lung_sy * scale[z]
                bx = cx + side * sep + radius * np.cos(theta) * sx
                by = lung_cy + radius * np.sin(theta) * sy
                sigma = rng.uniform(0.16, 0.28) * min(sx, sy)
                blob = lesion_delta * np.exp(
                    -((xs - bx) ** 2 + (ys - by) ** 2) / (2.0 * sigma * sigma)
                )
                m = lung[z]
                clean[z][m] += blob[m]
                n_blobs += 1
        np.clip(clean, 0.0, 1.0, out=clean)

    meta = SynthMeta(
        clean=clean,
        lung_mask=lung,
        lung_pixel_counts=lung.sum(axis=(1, 2)),
        n_blobs=n_blobs,
    )
    return clean, meta


def _apply_profile(clean: np.ndarray, profile: SourceProfile, rng: np.random.Generator) -> np.ndarray:
    out = 0.5 + profile.contrast_gain * (clean - 0.5) + profile.brightness_offset
    if profile.noise_sigma > 0:
        out = out + rng.normal(0.0, profile.noise_sigma, size=clean.shape)
    np.clip(out, 0.0, 1.0, out=out)
    return np.round(out * 65535.0).astype(np.uint16)


def synth_scan_parts(
    profile: SourceProfile,
    label: int,
    rng: np.random.Generator,
    resolution: int = 64,
    lesion_count_range: tuple[int, int] = (1, 4),
    lesion_delta: float = 0.25,
    scan_id: str = "",
) -> tuple[ScanVolume, SynthMeta]:
    """Generate one scan plus its ground-truth metadata."""
    clean, meta = _render_clean(profile, label, rng, resolution, lesion_count_range, lesion_delta)
    voxels = _apply_profile(clean, profile, rng)
    volume = ScanVolume(scan_id=scan_id, voxels=voxels, source=profile.source, label=label)
    return volume, meta


def synth_scan(
    profile: SourceProfile,
    label: int,
    rng: np.random.Generator,
    resolution: int = 64,
    lesion_count_range: tuple[int, int] = (1, 4),
    lesion_delta: float = 0.25,
    scan_id: str = "",
) -> ScanVolume:
    """Generate one labeled scan; a pure function of (profile, label, rng seed)."""
    volume, _ = synth_scan_parts(
        profile, label, rng, resolution, lesion_count_range, lesion_delta, scan_id
    )
    return volume


def lesion_presence_oracle(
    volume: ScanVolume,
    lung_mask: np.ndarray,
    profile: SourceProfile,
    lesion_delta: float = 0.25,
    min_pixels: int = 10,
) -> int:
    """Predict the label from ground truth: count lung pixels clearly above
    the lung background level (half the transformed lesion amplitude)."""
    vals = volume.voxels[lung_mask] / 65535.0
    background = float(np.median(vals))
    threshold = background + profile.contrast_gain * lesion_delta / 2.0
    return int((vals > threshold).sum() >= min_pixels)


def generate_dataset(
    config: GenConfig,
    out_dir: str | Path,
    profiles: tuple[SourceProfile, ...] = DEFAULT_PROFILES,
) -> Path:
    """Write one scan file per record plus a manifest; returns the manifest path.

    Every scan derives its own child seed from (config.seed, scan index), so
    generation order (or parallelism) cannot change the output.
    """
    out_dir = Path(out_dir)
    scans_dir = out_dir / "scans"
    scans_dir.mkdir(parents=True, exist_ok=True)
    records: list[ManifestRecord] = []
    index = 0
    cells = (
        ("train", config.covid_train, config.noncovid_train),
        ("val", config.covid_val, config.noncovid_val),
    )
    for split, covid_counts, noncovid_counts in cells:
        for source in range(4):
            for label, count in ((1, covid_counts[source]), (0, noncovid_counts[source])):
                for i in range(count):
                    rng = child_rng(config.seed, "scan", index)
                    index += 1
                    scan_id = f"{split}_s{source}_y{label}_{i:04d}"
                    volume = synth_scan(
                        profiles[source],
                        label,
                        rng,
                        resolution=config.resolution,
                        lesion_count_range=config.lesion_count_range,
                        lesion_delta=config.lesion_intensity_delta,
                        scan_id=scan_id,
                    )
                    rel_path = f"scans/{scan_id}.msct"
                    write_scan(volume, out_dir / rel_path)
                    records.append(
                        ManifestRecord(scan_id=scan_id, path=rel_path, source=source, label=label, split=split)
                    )
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(records, manifest_path)
    return manifest_path
