"""Embedding providers standing in for the frozen vision and text towers.

A provider turns inputs into frozen features ``z`` and exposes the frozen
base weight ``W`` of its final linear layer; the trainable low-rank adapter
attaches there, so the embedding is ``W z + B A z``.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from ..errors import MissingEmbedding, ShapeMismatch
from ..labeler.rules import normalize_impression
from .ops import lora_apply
from .params import LoraAdapter

_WORD = re.compile(r"[a-z0-9]+(?:['\-][a-z0-9]+)*")


class VisionProvider(Protocol):
    d: int
    base_weight: np.ndarray

    def features(self, slices: Sequence) -> np.ndarray: ...


class TextProvider(Protocol):
    d: int
    base_weight: np.ndarray

    def features(self, texts: Sequence[str]) -> np.ndarray: ...


def area_downsample(img: np.ndarray, size: int) -> np.ndarray:
    """Average pixels into a ``size`` x ``size`` grid (bilinear if the image is smaller)."""
    h, w = img.shape[:2]
    if h < size or w < size:
        from ..slices import resize_bilinear

        return resize_bilinear(img, (size, size))
    rows = (np.arange(h) * size) // h
    cols = (np.arange(w) * size) // w
    out = np.zeros((size, size) + img.shape[2:])
    np.add.at(out, (rows[:, None], cols[None, :]), img)
    counts = np.zeros((size, size))
    np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
    return out / counts.reshape(counts.shape + (1,) * (img.ndim - 2))


class ToyVisionEncoder:
    """Downsample to 16x16x3, centre, fixed random projection to ``d``, then a frozen linear layer."""

    def __init__(self, d: int = 512, seed: int = 0, grid: int = 16):
        self.d, self.grid = d, grid
        k = grid * grid * 3
        rng = np.random.default_rng([seed, 0x5EED])
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(k), (d, k))
        self.base_weight = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))

    def features(self, slices: Sequence) -> np.ndarray:
        pix = np.stack([area_downsample(getattr(s, "pixels", s), self.grid).ravel() - 0.5
                        for s in slices])
        return pix @ self.projection.T


class ToyTextEncoder:
    """Hashed bag-of-words counts through a fixed random projection, then a frozen linear layer."""

    def __init__(self, d: int = 512, seed: int = 0, buckets: int = 4096):
        self.d, self.buckets = d, buckets
        rng = np.random.default_rng([seed, 0x7E47])
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(d), (d, buckets))
        self.base_weight = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.buckets

    def counts(self, text: str) -> np.ndarray:
        c = np.zeros(self.buckets)
        for tok in _WORD.findall(normalize_impression(text)):
            c[self.bucket(tok)] += 1.0
        return c

    def features(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.counts(t) for t in texts]) @ self.projection.T


def text_key(normalized_impression: str) -> str:
    return hashlib.sha256(normalized_impression.encode()).hexdigest()


class FileSliceEmbeddings:
    """Precomputed slice embeddings from JSON lines ``{study_id, plane, index, values}``."""

    def __init__(self, table: dict[tuple[str, str, int], np.ndarray]):
        self.table = table
        dims = {v.shape[0] for v in table.values()}
        if len(dims) > 1:
            raise ShapeMismatch(f"mixed embedding dimensions in store: {sorted(dims)}")
        self.d = dims.pop() if dims else 0
        self.base_weight = np.eye(self.d)

    @classmethod
    def load(cls, path) -> "FileSliceEmbeddings":
        table = {}
        for rec in _read_jsonl(path):
            key = (rec["study_id"], str(rec["plane"]), int(rec["index"]))
            table[key] = np.asarray(rec["values"], dtype=np.float64)
        return cls(table)

    def features(self, slices: Sequence) -> np.ndarray:
        out = []
        for s in slices:
            plane = getattr(s.plane, "value", s.plane)
            key = (s.study_id, str(plane), int(s.index))
            if key not in self.table:
                raise MissingEmbedding(f"no stored embedding for {key}")
            out.append(self.table[key])
        return np.stack(out)


class FileTextEmbeddings:
    """Precomputed text embeddings from JSON lines ``{text_hash, values}``."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = table
        self.d = next(iter(table.values())).shape[0] if table else 0
        self.base_weight = np.eye(self.d)

    @classmethod
    def load(cls, path) -> "FileTextEmbeddings":
        return cls({rec["text_hash"]: np.asarray(rec["values"], dtype=np.float64)
                    for rec in _read_jsonl(path)})

    def features(self, texts: Sequence[str]) -> np.ndarray:
        out = []
        for t in texts:
            key = text_key(normalize_impression(t))
            if key not in self.table:
                raise MissingEmbedding(f"no stored text embedding for {t!r}")
            out.append(self.table[key])
        return np.stack(out)


def _read_jsonl(path) -> Iterable[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def embed_slices(provider: VisionProvider, slices: Sequence,
                 adapter: LoraAdapter | None = None) -> np.ndarray:
    """One embedding per slice, ``(S, d)``."""
    if len(slices) == 0:
        raise ValueError("embed_slices needs at least one slice")
    z = provider.features(slices)
    if adapter is None:
        return z @ provider.base_weight.T
    return lora_apply(lambda x: x @ provider.base_weight.T, adapter, z)


def embed_text(provider: TextProvider, normalized_impression: str,
               adapter: LoraAdapter | None = None) -> np.ndarray:
    z = provider.features([normalize_impression(normalized_impression)])
    if adapter is None:
        return (z @ provider.base_weight.T)[0]
    return lora_apply(lambda x: x @ provider.base_weight.T, adapter, z)[0]


def write_slice_embeddings(path, records: Iterable[tuple[str, str, int, np.ndarray]]) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for study_id, plane, index, values in records:
            fh.write(json.dumps({"study_id": study_id, "plane": plane, "index": int(index),
                                 "values": [float(v) for v in values]}) + "\n")
    return path
