"""Bit-exact persistence for scan volumes, dataset manifests, and results.

Scan file layout: magic ``MSCT`` | u32-LE width | u32-LE height | u32-LE depth
| depth*height*width u16-LE voxels in row-major, slice-major order.
Manifests are UTF-8 JSON lines with keys scan_id, path, source, label, split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import N_SOURCES

MAGIC = b"MSCT"
SPLITS = ("train", "val")


class ScanFormatError(ValueError):
    """Raised when a scan file does not parse as the MSCT format."""


class ManifestError(ValueError):
    """Raised when a manifest line is malformed or violates an invariant."""


def check_source(value: int, n_sources: int = N_SOURCES) -> int:
    value = int(value)
    if not 0 <= value < n_sources:
        raise ValueError(f"source must be in [0, {n_sources}), got {value}")
    return value


def check_label(value: int) -> int:
    value = int(value)
    if value not in (0, 1):
        raise ValueError(f"label must be 0 (non-COVID) or 1 (COVID), got {value}")
    return value


@dataclass
class ScanVolume:
    """A 3D stack of grayscale slices with source and diagnosis labels.

    ``voxels`` has shape (depth, height, width), dtype uint16. All slices of
    one scan share a single (width, height); the constructor enforces it.
    """

    scan_id: str
    voxels: np.ndarray
    source: int
    label: int

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be (depth, height, width), got shape {self.voxels.shape}")
        if self.voxels.dtype != np.uint16:
            raise ValueError(f"voxels must be uint16, got {self.voxels.dtype}")
        if min(self.voxels.shape) < 1:
            raise ValueError(f"all dimensions must be positive, got {self.voxels.shape}")
        self.source = check_source(self.source)
        self.label = check_label(self.label)

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]


@dataclass(frozen=True)
class ManifestRecord:
    scan_id: str
    path: str
    source: int
    label: int
    split: str


def write_scan(volume: ScanVolume, path: str | Path) -> None:
    """Write ``volume`` to ``path`` in the MSCT binary format."""
    path = Path(path)
    header = MAGIC + struct.pack("<III", volume.width, volume.height, volume.depth)
    payload = volume.voxels.astype("<u2").tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"failed to write scan {path}: {exc}") from exc


def read_scan(path: str | Path, scan_id: str = "", source: int = 0, label: int = 0) -> ScanVolume:
    """Read an MSCT file. Source and label come from the manifest, not the file."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ScanFormatError(f"not a scan file: {path}")
    if len(data) < 16:
        raise ScanFormatError(f"invalid header (truncated): {path}")
    width, height, depth = struct.unpack("<III", data[4:16])
    if width == 0 or height == 0 or depth == 0:
        raise ScanFormatError(f"invalid header (zero dimension): {path}")
    expected = 16 + 2 * width * height * depth
    if len(data) != expected:
        raise ScanFormatError(f"corrupt scan: {path} has {len(data)} bytes, expected {expected}")
    voxels = np.frombuffer(data, dtype="<u2", offset=16).reshape(depth, height, width)
    return ScanVolume(scan_id=scan_id or path.stem, voxels=voxels.astype(np.uint16), source=source, label=label)


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    """Load a JSON-lines manifest, preserving file order.

    Raises ManifestError with a 1-based line number on any malformed line,
    duplicate scan_id, or unknown split.
    """
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = ManifestRecord(
                    scan_id=str(obj["scan_id"]),
                    path=str(obj["path"]),
                    source=check_source(obj["source"]),
                    label=check_label(obj["label"]),
                    split=str(obj["split"]),
                )
            except ManifestError:
                raise
            except (KeyError, ValueError, TypeError) as exc:
                raise ManifestError(f"line {lineno}: malformed manifest record ({exc})") from exc
            if rec.split not in SPLITS:
                raise ManifestError(f"line {lineno}: unknown split {rec.split!r}")
            if rec.scan_id in seen:
                raise ManifestError(f"line {lineno}: duplicate scan_id {rec.scan_id!r}")
            seen.add(rec.scan_id)
            records.append(rec)
    return records


def save_manifest(records: list[ManifestRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "scan_id": rec.scan_id,
                        "path": rec.path,
                        "source": rec.source,
                        "label": rec.label,
                        "split": rec.split,
                    },
                    sort_keys=False,
                )
                + "\n"
            )
