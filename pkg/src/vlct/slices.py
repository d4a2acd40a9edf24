"""Slice planning, HU windowing into RGB slices, and montage construction."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import IndexOutOfRange, VolumeTooSmall
from .volume import MIN_SLICES, VoxelVolume


class Plane(str, Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        return {"axial": 0, "coronal": 1, "sagittal": 2}[self.value]


class EncodingMode(str, Enum):
    GRAYSCALE = "grayscale"
    ADJACENT_RGB = "adjacent_rgb"
    MULTIWINDOW_RGB = "multiwindow_rgb"


class Sampling(str, Enum):
    LINEAR = "linear"
    STRATIFIED = "stratified"


@dataclass(frozen=True)
class HuWindow:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window needs lo < hi, got [{self.lo}, {self.hi}]")


SOFT_TISSUE = HuWindow(-150, 250)
FULL_RANGE = HuWindow(-1000, 1000)
ENHANCED = HuWindow(0, 500)
MONTAGE_WINDOW = HuWindow(-160, 240)


@dataclass(frozen=True)
class EncodingConfig:
    mode: EncodingMode = EncodingMode.MULTIWINDOW_RGB
    counts: dict = field(default_factory=lambda: {Plane.AXIAL: 16, Plane.CORONAL: 6,
                                                  Plane.SAGITTAL: 6})
    sampling: Sampling = Sampling.LINEAR
    range: tuple[float, float] = (0.20, 0.80)
    windows: tuple[HuWindow, ...] = (SOFT_TISSUE, FULL_RANGE, ENHANCED)
    window: HuWindow = SOFT_TISSUE  # used by grayscale and adjacent modes

    def __post_init__(self):
        counts = {Plane(p): int(n) for p, n in self.counts.items()}
        if any(n < 1 for n in counts.values()):
            raise ValueError(f"slice counts must be >= 1, got {counts}")
        lo, hi = self.range
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"range must satisfy 0 <= lo < hi <= 1, got {self.range}")
        if len(self.windows) != 3:
            raise ValueError("multi-window encoding needs exactly three windows")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "mode", EncodingMode(self.mode))
        object.__setattr__(self, "sampling", Sampling(self.sampling))

    @property
    def planes(self) -> list[Plane]:
        return [p for p in Plane if p in self.counts]

    @property
    def max_slices(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "counts": {p.value: n for p, n in self.counts.items()},
            "sampling": self.sampling.value,
            "range": list(self.range),
            "windows": [[w.lo, w.hi] for w in self.windows],
            "window": [self.window.lo, self.window.hi],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingConfig":
        kw = dict(d)
        if "counts" in kw:
            kw["counts"] = {Plane(p): n for p, n in kw["counts"].items()}
        if "windows" in kw:
            kw["windows"] = tuple(HuWindow(*w) for w in kw["windows"])
        if "window" in kw:
            kw["window"] = HuWindow(*kw["window"])
        if "range" in kw:
            kw["range"] = tuple(kw["range"])
        return cls(**kw)


@dataclass
class RgbSlice:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    plane: Plane
    fraction: float
    index: int = -1
    study_id: str = ""


@dataclass
class MontageImage:
    pixels: np.ndarray
    layout: dict  # plane -> (rows, cols)

    def to_uint8(self) -> np.ndarray:
        return np.floor(np.clip(self.pixels, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)

    def save_png(self, path) -> Path:
        path = Path(path)
        Image.fromarray(self.to_uint8(), mode="RGB").save(path, format="PNG")
        return path

    def png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.to_uint8(), mode="RGB").save(buf, format="PNG")
        return buf.getvalue()


def _round_index(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_fractions(count: int, rng_range=(0.2, 0.8), sampling=Sampling.LINEAR,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    lo, hi = rng_range
    if Sampling(sampling) is Sampling.LINEAR:
        if count == 1:
            return np.array([(lo + hi) / 2])
        return np.linspace(lo, hi, count)
    if rng is None:
        raise ValueError("stratified sampling needs a generator")
    edges = np.linspace(lo, hi, count + 1)
    return edges[:-1] + rng.uniform(size=count) * np.diff(edges)


def plan_slices(extent, config: EncodingConfig, seed: int = 0) -> list[tuple[Plane, int, float]]:
    """Slice positions for every configured plane.

    ``extent`` maps plane -> dimension along that plane's axis (a volume
    shape tuple is also accepted). Returns ``(plane, index, fraction)``
    triples; duplicate indices within a plane are dropped, order kept.
    """
    if not isinstance(extent, dict):
        extent = {p: int(extent[p.axis]) for p in Plane}
    rng = np.random.default_rng(seed)
    plan = []
    for plane in config.planes:
        dim = int(extent[plane])
        if dim < 1:
            raise IndexOutOfRange(f"{plane.value} extent must be >= 1")
        fractions = plan_fractions(config.counts[plane], config.range, config.sampling, rng)
        seen = set()
        for f in fractions:
            idx = _round_index(f * (dim - 1))
            if idx not in seen:
                seen.add(idx)
                plan.append((plane, idx, float(f)))
    return plan


def window_to_unit(hu, w: HuWindow):
    """Linear map of HU onto [0, 1] across the window, clamped outside it."""
    out = (np.asarray(hu, dtype=np.float64) - w.lo) / (w.hi - w.lo)
    return np.clip(out, 0.0, 1.0)


def get_slice(data: np.ndarray, plane: Plane, index: int) -> np.ndarray:
    plane = Plane(plane)
    n = data.shape[plane.axis]
    if not 0 <= index < n:
        raise IndexOutOfRange(f"{plane.value} index {index} outside [0, {n})")
    return np.take(data, index, axis=plane.axis)


def encode_slice(v: VoxelVolume, plane: Plane, index: int, config: EncodingConfig,
                 fraction: float = float("nan")) -> RgbSlice:
    plane = Plane(plane)
    center = get_slice(v.data, plane, index)
    if config.mode is EncodingMode.MULTIWINDOW_RGB:
        channels = [window_to_unit(center, w) for w in config.windows]
    elif config.mode is EncodingMode.GRAYSCALE:
        g = window_to_unit(center, config.window)
        channels = [g, g, g]
    else:
        n = v.data.shape[plane.axis]
        neighbours = [min(max(i, 0), n - 1) for i in (index - 1, index, index + 1)]
        channels = [window_to_unit(get_slice(v.data, plane, i), config.window) for i in neighbours]
    pixels = np.stack(channels, axis=-1)
    return RgbSlice(pixels, plane, fraction, index, v.study_id)


def encode_volume(v: VoxelVolume, config: EncodingConfig, seed: int = 0) -> list[RgbSlice]:
    return [encode_slice(v, p, i, config, f) for p, i, f in plan_slices(v.shape, config, seed)]


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H x W (x C) image with half-pixel centres and edge clamping."""
    h, w = img.shape[:2]
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return img.astype(np.float64, copy=True)
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    img = img.astype(np.float64)
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest", prefilter=False)
    return np.stack(
        [ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest", prefilter=False)
         for c in range(img.shape[2])],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# montage for the generation pathway
# ---------------------------------------------------------------------------

MONTAGE_COUNTS = {Plane.AXIAL: 16, Plane.CORONAL: 10, Plane.SAGITTAL: 10}
MONTAGE_CELL = 256
MONTAGE_COLUMNS = 3
MONTAGE_MAX_SIDE = 1536


@dataclass(frozen=True)
class Jitter:
    slice_jitter: int = 3
    hu_jitter: int = 25


def montage_canvas(v: VoxelVolume, jitter: Jitter | None = None, seed: int = 0,
                   counts=None, window: HuWindow = MONTAGE_WINDOW):
    """Pre-resize montage canvas and its per-plane (rows, cols) layout."""
    if v.n_slices < MIN_SLICES:
        raise VolumeTooSmall(f"volume has {v.n_slices} slices, need >= {MIN_SLICES}")
    counts = MONTAGE_COUNTS if counts is None else {Plane(p): n for p, n in counts.items()}
    rng = np.random.default_rng(seed)
    if jitter is not None:
        window = HuWindow(window.lo + int(rng.integers(-jitter.hu_jitter, jitter.hu_jitter + 1)),
                          window.hi + int(rng.integers(-jitter.hu_jitter, jitter.hu_jitter + 1)))
    config = EncodingConfig(mode=EncodingMode.ADJACENT_RGB, counts=counts, window=window)

    blocks, layout = [], {}
    for plane in config.planes:
        n = v.data.shape[plane.axis]
        indices = [i for p, i, _ in plan_slices(v.shape, config) if p is plane]
        if jitter is not None:
            offsets = rng.integers(-jitter.slice_jitter, jitter.slice_jitter + 1, size=len(indices))
            indices = [min(max(i + int(o), 0), n - 1) for i, o in zip(indices, offsets)]
        rows = math.ceil(len(indices) / MONTAGE_COLUMNS)
        block = np.zeros((rows * MONTAGE_CELL, MONTAGE_COLUMNS * MONTAGE_CELL, 3))
        for k, idx in enumerate(indices):
            cell = encode_slice(v, plane, idx, config).pixels
            cell = resize_bilinear(cell, (MONTAGE_CELL, MONTAGE_CELL))
            r, c = divmod(k, MONTAGE_COLUMNS)
            block[r * MONTAGE_CELL:(r + 1) * MONTAGE_CELL,
                  c * MONTAGE_CELL:(c + 1) * MONTAGE_CELL] = cell
        blocks.append(block)
        layout[plane] = (rows, MONTAGE_COLUMNS)
    return np.concatenate(blocks, axis=0), layout


def build_montage(v: VoxelVolume, jitter: Jitter | None = None, seed: int = 0,
                  counts=None) -> MontageImage:
    """Multiplanar adjacent-slice montage, longest side capped at 1536 px."""
    canvas, layout = montage_canvas(v, jitter, seed, counts)
    h, w = canvas.shape[:2]
    if max(h, w) > MONTAGE_MAX_SIDE:
        scale = MONTAGE_MAX_SIDE / max(h, w)
        out_hw = (max(1, _round_index(h * scale)), max(1, _round_index(w * scale)))
        canvas = np.clip(resize_bilinear(canvas, out_hw), 0.0, 1.0)
    return MontageImage(canvas, layout)


def montage_grid_shape(counts: Sequence[int]) -> tuple[list[int], tuple[int, int]]:
    """Rows per plane block and the pre-resize canvas (height, width)."""
    rows = [math.ceil(n / MONTAGE_COLUMNS) for n in counts]
    return rows, (sum(rows) * MONTAGE_CELL, MONTAGE_COLUMNS * MONTAGE_CELL)
