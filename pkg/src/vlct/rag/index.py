"""Cosine-similarity index over training volume embeddings, with MMR re-ranking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import EmptyIndex, EmptyPool, ShapeMismatch
from ..representation.ops import l2_normalize


@dataclass(frozen=True)
class Retrieved:
    study_id: str
    impression: str
    similarity: float
    row: int


@dataclass(frozen=True)
class EmbeddingIndex:
    vectors: np.ndarray          # (n, d), unit rows
    study_ids: tuple[str, ...]
    impressions: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatch(f"index vectors must be 2-D, got {v.shape}")
        if not (len(self.study_ids) == len(self.impressions) == v.shape[0]):
            raise ShapeMismatch("study ids, impressions and vectors must align")
        if len(set(self.study_ids)) != len(self.study_ids):
            raise ValueError("study ids in an index must be unique")
        if v.shape[0] and not np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6):
            raise ValueError("index rows must be unit-normalised")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "study_ids", tuple(self.study_ids))
        object.__setattr__(self, "impressions", tuple(self.impressions))

    @classmethod
    def build(cls, vectors, study_ids: Sequence[str], impressions: Sequence[str]) -> "EmbeddingIndex":
        v = np.asarray(vectors, dtype=np.float64)
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True), tuple(study_ids), tuple(impressions))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def save(self, path) -> None:
        np.savez(path, vectors=self.vectors, study_ids=np.array(self.study_ids),
                 impressions=np.array(self.impressions))

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with np.load(path) as z:
            return cls(z["vectors"], tuple(z["study_ids"].tolist()), tuple(z["impressions"].tolist()))


def index_topk(index: EmbeddingIndex, query, k: int) -> list[Retrieved]:
    """Top-k rows by cosine similarity, ties broken by row order."""
    if len(index) == 0:
        raise EmptyIndex("cannot search an empty index")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.vectors.shape[1],):
        raise ShapeMismatch(f"query shape {q.shape} vs index dim {index.vectors.shape[1]}")
    k = min(int(k), len(index))
    sims = index.vectors @ l2_normalize(q)
    order = np.argsort(-sims, kind="stable")[:k]
    return [Retrieved(index.study_ids[i], index.impressions[i], float(sims[i]), int(i)) for i in order]


@dataclass(frozen=True)
class MmrConfig:
    pool_size: int = 50
    k: int = 5
    lam: float = 0.7
    enabled: bool = True

    def __post_init__(self):
        if not 1 <= self.k <= self.pool_size:
            raise ValueError(f"need 1 <= k <= pool_size, got k={self.k}, pool={self.pool_size}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def mmr_select(candidates: Sequence[Retrieved], cand_sim, cfg: MmrConfig) -> list[Retrieved]:
    """Greedy maximal-marginal-relevance selection from a retrieved pool.

    ``cand_sim`` is the (P, P) candidate-to-candidate similarity matrix
    aligned with ``candidates``; relevance is each candidate's stored query
    similarity. Each step picks ``argmax lam*rel - (1-lam)*max_sim_to_selected``
    with ties going to the earlier pool position.
    """
    if not candidates:
        raise EmptyPool("MMR needs at least one candidate")
    S = np.asarray(cand_sim, dtype=np.float64)
    n = len(candidates)
    if S.shape != (n, n):
        raise ShapeMismatch(f"candidate similarity {S.shape} for a pool of {n}")
    rel = np.array([c.similarity for c in candidates])
    k = min(cfg.k, n)
    selected: list[int] = []
    redundancy = np.full(n, -np.inf)
    available = np.ones(n, dtype=bool)
    for _ in range(k):
        if selected:
            score = cfg.lam * rel - (1.0 - cfg.lam) * redundancy
        else:
            score = rel.copy()
        score[~available] = -np.inf
        pick = int(np.argmax(score))  # first maximum on ties
        selected.append(pick)
        available[pick] = False
        redundancy = np.maximum(redundancy, S[pick])
    return [candidates[i] for i in selected]


def text_similarity(text_vectors) -> np.ndarray:
    T = np.asarray(text_vectors, dtype=np.float64)
    T = T / np.linalg.norm(T, axis=1, keepdims=True)
    return T @ T.T


def retrieve(index: EmbeddingIndex, query, cfg: MmrConfig, text_vectors=None) -> list[Retrieved]:
    """Top-k retrieval, diversified by MMR over a ``pool_size`` pool when enabled.

    ``text_vectors`` holds one text embedding per index row; it is required
    when MMR is enabled.
    """
    if not cfg.enabled:
        return index_topk(index, query, cfg.k)
    if text_vectors is None:
        raise ValueError("MMR needs text embeddings for the indexed impressions")
    pool = index_topk(index, query, cfg.pool_size)
    rows = [c.row for c in pool]
    return mmr_select(pool, text_similarity(np.asarray(text_vectors)[rows]), cfg)
