"""Multi-positive symmetric contrastive loss over a volume/text similarity matrix.

For logits ``z = s / tau`` and positive mask ``P`` (``P[i, j]`` true when
samples i and j share a normalised impression)::

    loss = 1/(2N) * sum_i [ LSE_k z[i, k] - LSE_{j in P_i} z[i, j]      (volume -> text)
                          + LSE_k z[k, i] - LSE_{j in P_i} z[j, i] ]    (text -> volume)

Every log-sum-exp is max-shifted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InvalidTemperature, ShapeMismatch
from ..labeler.rules import normalize_impression


@dataclass(frozen=True)
class PositiveSets:
    mask: np.ndarray  # (N, N) bool, an equivalence relation

    @property
    def n(self) -> int:
        return self.mask.shape[0]

    def members(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.mask[i]).tolist())

    @classmethod
    def from_groups(cls, groups: Sequence) -> "PositiveSets":
        g = np.asarray(groups)
        return cls(g[:, None] == g[None, :])


def build_positive_sets(normalized_impressions: Sequence[str]) -> PositiveSets:
    """``P_i = {j : text_j == text_i}`` on normalised text."""
    if len(normalized_impressions) == 0:
        raise ValueError("need at least one impression")
    texts = [normalize_impression(t) for t in normalized_impressions]
    ids = {t: k for k, t in enumerate(dict.fromkeys(texts))}
    return PositiveSets.from_groups([ids[t] for t in texts])


def _lse(z: np.ndarray, mask: np.ndarray | None, axis: int) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(z: np.ndarray, mask: np.ndarray | None, axis: int) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _check(s, P, tau):
    s = np.asarray(s, dtype=np.float64)
    mask = P.mask if isinstance(P, PositiveSets) else np.asarray(P, dtype=bool)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or mask.shape != s.shape:
        raise ShapeMismatch(f"similarity {s.shape} and positives {mask.shape} must be square and equal")
    if not (np.isfinite(tau) and tau > 0):
        raise InvalidTemperature(f"temperature must be positive and finite, got {tau}")
    if not mask.diagonal().all():
        raise ValueError("every sample must be its own positive")
    return s, mask


def multipositive_loss(s, P, tau: float) -> float:
    s, mask = _check(s, P, tau)
    z = s / tau
    n = s.shape[0]
    rows = _lse(z, None, 1) - _lse(z, mask, 1)
    cols = _lse(z, None, 0) - _lse(z, mask.T, 0)
    return float((rows.sum() + cols.sum()) / (2 * n))


def multipositive_loss_and_grad(s, P, log_tau: float):
    """Loss, d loss / d s, and d loss / d log tau."""
    tau = math.exp(log_tau)
    s, mask = _check(s, P, tau)
    z = s / tau
    n = s.shape[0]
    rows = _lse(z, None, 1) - _lse(z, mask, 1)
    cols = _lse(z, None, 0) - _lse(z, mask.T, 0)
    loss = float((rows.sum() + cols.sum()) / (2 * n))
    dz = (_softmax(z, None, 1) - _softmax(z, mask, 1)
          + _softmax(z, None, 0) - _softmax(z, mask.T, 0)) / (2 * n)
    return loss, dz / tau, float(-(dz * z).sum())
