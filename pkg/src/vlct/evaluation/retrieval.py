"""Duplicate-aware Recall@K and MRR for cross-modal retrieval."""

from __future__ import annotations

from math import comb
from typing import Sequence

import numpy as np

from ..errors import NoPositiveInGallery, ShapeMismatch


def equivalence_classes(normalized_impressions: Sequence[str]) -> np.ndarray:
    """Class id per sample; samples sharing a normalised impression share an id."""
    ids: dict[str, int] = {}
    return np.array([ids.setdefault(t, len(ids)) for t in normalized_impressions])


def first_match_ranks(sim, query_classes, gallery_classes) -> np.ndarray:
    """1-based rank of the first gallery item in each query's class.

    Gallery order is by descending similarity, ties by ascending index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    q = np.asarray(query_classes)
    g = np.asarray(gallery_classes)
    if sim.shape != (len(q), len(g)):
        raise ShapeMismatch(f"similarity {sim.shape} vs {len(q)} queries x {len(g)} gallery items")
    ranks = np.empty(len(q), dtype=np.int64)
    for i in range(len(q)):
        order = np.argsort(-sim[i], kind="stable")
        hits = np.flatnonzero(g[order] == q[i])
        if hits.size == 0:
            raise NoPositiveInGallery(f"query {i} has no equivalent item in the gallery")
        ranks[i] = hits[0] + 1
    return ranks


def metrics_from_ranks(ranks, Ks=(1, 5, 10)) -> dict:
    ranks = np.asarray(ranks)
    out = {f"R@{k}": float(np.mean(ranks <= k)) for k in Ks}
    out["MRR"] = float(np.mean(1.0 / ranks))
    return out


def retrieval_eval(sim, classes, Ks=(1, 5, 10), gallery_classes=None) -> dict:
    """R@K and MRR for queries along the rows of ``sim``.

    ``classes`` labels the queries; the gallery uses the same labels
    unless ``gallery_classes`` is given.
    """
    g = classes if gallery_classes is None else gallery_classes
    return metrics_from_ranks(first_match_ranks(sim, classes, g), Ks)


def retrieval_both(sim, classes, Ks=(1, 5, 10)) -> dict:
    """Image-to-text (rows = volumes) and text-to-image (rows = texts) tables."""
    sim = np.asarray(sim)
    return {"image_to_text": retrieval_eval(sim, classes, Ks),
            "text_to_image": retrieval_eval(sim.T, classes, Ks)}


def expected_reciprocal_rank(n: int, m: int) -> float:
    """E[1/R] for the first of ``m`` relevant items in a uniformly random order of ``n``."""
    total = comb(n, m)
    return sum(comb(n - r, m - 1) / total / r for r in range(1, n - m + 2))


def random_mrr(classes) -> float:
    """MRR a uniformly random ranker is expected to reach on a paired gallery."""
    classes = np.asarray(classes)
    n = len(classes)
    _, inverse, counts = np.unique(classes, return_inverse=True, return_counts=True)
    return float(np.mean([expected_reciprocal_rank(n, counts[c]) for c in inverse]))
