"""CT volume ingestion: HU rescaling, isotropic resampling and series selection.

Volumes live on disk as a pair of files::

    <study_id>.ctvol.json   header (shape, spacing, dtype, rescale, study_id)
    <study_id>.ctvol.bin    C-order little-endian int16 payload

An ingestion manifest is a JSON-lines file with one record per series,
``{"study_id", "header_path", "payload_path"}`` plus an optional
``series_id``. Several records sharing a study id are series candidates
for that study.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    ContainerFormatError,
    EmptyVolume,
    InvalidRescale,
    InvalidSpacing,
    NoEligibleSeries,
)

HU_MIN = -1000
HU_MAX = 1000
MIN_SLICES = 30


def round_half_away(x):
    """Round to nearest integer, halves away from zero (``np.round`` rounds to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class VoxelVolume:
    """HU grid ordered (axial, row, column) with spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    study_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise EmptyVolume(f"expected a 3D array, got shape {data.shape}")
        if min(data.shape) == 0:
            raise EmptyVolume(f"volume has an empty axis: {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InvalidSpacing(f"spacing must be 3 positive finite values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]


@dataclass
class SeriesCandidate:
    """One series of an examination; ``volume`` may be a zero-argument loader."""

    series_id: str
    slice_count: int
    volume: VoxelVolume | Callable[[], VoxelVolume] | None = field(default=None, repr=False)

    def load(self) -> VoxelVolume:
        if self.volume is None:
            raise ContainerFormatError(f"series {self.series_id} has no volume attached")
        vol = self.volume() if callable(self.volume) else self.volume
        if vol.n_slices != self.slice_count:
            raise ContainerFormatError(
                f"series {self.series_id}: header says {self.slice_count} slices, "
                f"volume has {vol.n_slices}"
            )
        return vol


def rescale_to_hu(raw, slope: float, intercept: float, spacing=(1.0, 1.0, 1.0),
                  study_id: str = "") -> VoxelVolume:
    """Convert stored pixel values to clipped HU.

    Each voxel becomes ``clamp(round(raw * slope + intercept), -1000, 1000)``
    with halves rounded away from zero.
    """
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.size == 0:
        raise EmptyVolume(f"raw array must be 3D and nonempty, got shape {raw.shape}")
    if not (math.isfinite(slope) and math.isfinite(intercept)):
        raise InvalidRescale(f"non-finite rescale parameters ({slope}, {intercept})")
    if slope == 0:
        raise InvalidRescale("rescale slope must be nonzero")
    hu = round_half_away(raw.astype(np.float64) * slope + intercept)
    hu = np.clip(hu, HU_MIN, HU_MAX).astype(np.int16)
    return VoxelVolume(hu, spacing, study_id)


def resample_isotropic(v: VoxelVolume, target_spacing_mm: float = 1.0) -> VoxelVolume:
    """Trilinear resampling onto a grid with equal spacing on every axis.

    Output index ``o`` on an axis samples input coordinate ``o * t / s``
    (grids share their first voxel); coordinates past the last voxel are
    clamped to the edge. Output size per axis is ``max(1, round(n * s / t))``.
    Values are re-rounded to integer HU.
    """
    t = float(target_spacing_mm)
    if not (math.isfinite(t) and t > 0):
        raise InvalidSpacing(f"target spacing must be positive, got {target_spacing_mm}")
    if all(s == t for s in v.spacing):
        return VoxelVolume(v.data.copy(), v.spacing, v.study_id)

    out_shape = [max(1, int(round_half_away(n * s / t))) for n, s in zip(v.shape, v.spacing)]
    axes = [np.arange(m, dtype=np.float64) * (t / s) for m, s in zip(out_shape, v.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(
        v.data.astype(np.float64), coords, order=1, mode="nearest", prefilter=False
    )
    out = np.clip(round_half_away(out), HU_MIN, HU_MAX).astype(np.int16)
    return VoxelVolume(out, (t, t, t), v.study_id)


def select_series(candidates: Sequence[SeriesCandidate]) -> SeriesCandidate:
    """Largest series with at least 30 slices; ties go to the smallest series id."""
    if not candidates:
        raise NoEligibleSeries("no series candidates given")
    eligible = [c for c in candidates if c.slice_count >= MIN_SLICES]
    if not eligible:
        counts = sorted(c.slice_count for c in candidates)
        raise NoEligibleSeries(f"every series has fewer than {MIN_SLICES} slices: {counts}")
    return min(eligible, key=lambda c: (-c.slice_count, c.series_id))


# ---------------------------------------------------------------------------
# on-disk container
# ---------------------------------------------------------------------------

HEADER_SUFFIX = ".ctvol.json"
PAYLOAD_SUFFIX = ".ctvol.bin"


def write_container(directory, raw, spacing, study_id: str, series_id: str | None = None,
                    slope: float = 1.0, intercept: float = 0.0) -> tuple[Path, Path]:
    """Write ``raw`` stored values plus header; returns (header_path, payload_path)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = np.asarray(raw)
    stem = study_id if series_id is None else f"{study_id}__{series_id}"
    header_path = directory / f"{stem}{HEADER_SUFFIX}"
    payload_path = directory / f"{stem}{PAYLOAD_SUFFIX}"
    header = {
        "study_id": study_id,
        "series_id": series_id or study_id,
        "shape": [int(n) for n in raw.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": "<i2",
        "rescale_slope": float(slope),
        "rescale_intercept": float(intercept),
    }
    header_path.write_text(json.dumps(header, indent=2))
    payload_path.write_bytes(np.ascontiguousarray(raw, dtype="<i2").tobytes(order="C"))
    return header_path, payload_path


def read_header(header_path) -> dict:
    header = json.loads(Path(header_path).read_text())
    for key in ("study_id", "shape", "spacing"):
        if key not in header:
            raise ContainerFormatError(f"{header_path}: header lacks '{key}'")
    if header.get("dtype", "<i2") != "<i2":
        raise ContainerFormatError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    return header


def read_container(header_path, payload_path=None) -> VoxelVolume:
    """Load a container and convert it to clipped HU."""
    header_path = Path(header_path)
    header = read_header(header_path)
    if payload_path is None:
        payload_path = header_path.with_name(
            header_path.name[: -len(HEADER_SUFFIX)] + PAYLOAD_SUFFIX
        )
    shape = tuple(int(n) for n in header["shape"])
    raw = np.fromfile(payload_path, dtype="<i2")
    if raw.size != int(np.prod(shape)):
        raise ContainerFormatError(
            f"{payload_path}: payload has {raw.size} voxels, header expects {shape}"
        )
    return rescale_to_hu(
        raw.reshape(shape),
        header.get("rescale_slope", 1.0),
        header.get("rescale_intercept", 0.0),
        spacing=header["spacing"],
        study_id=header["study_id"],
    )


def read_manifest(path) -> list[dict]:
    records = []
    base = Path(path).parent
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("study_id", "header_path", "payload_path"):
                if key not in rec:
                    raise ContainerFormatError(f"manifest record missing '{key}': {rec}")
            rec["header_path"] = str(base / rec["header_path"])
            rec["payload_path"] = str(base / rec["payload_path"])
            records.append(rec)
    return records


def series_candidates(records: Iterable[dict]) -> dict[str, list[SeriesCandidate]]:
    """Group manifest records by study into lazily loaded candidates."""
    grouped: dict[str, list[SeriesCandidate]] = {}
    for rec in records:
        header = read_header(rec["header_path"])
        series_id = rec.get("series_id") or header.get("series_id") or rec["study_id"]
        loader = (lambda h=rec["header_path"], p=rec["payload_path"]: read_container(h, p))
        grouped.setdefault(rec["study_id"], []).append(
            SeriesCandidate(series_id, int(header["shape"][0]), loader)
        )
    return grouped
