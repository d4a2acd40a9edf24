"""Learnable parameter containers and their seeded initialisation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch

INIT_STD = 0.02


def _static(default):
    return field(default=default, metadata={"static": True})


class ParamSet:
    """Mixin for frozen dataclasses whose non-static fields are arrays."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if not f.metadata.get("static")}

    def statics(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if f.metadata.get("static")}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())


@dataclass(frozen=True)
class LoraAdapter(ParamSet):
    """Low-rank update ``B @ A`` for a frozen (d, k) base weight."""

    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)

    def __post_init__(self):
        r, k = self.A.shape
        d, r2 = self.B.shape
        if r != r2:
            raise ShapeMismatch(f"A is {self.A.shape} but B is {self.B.shape}")
        if not 1 <= r <= min(d, k):
            raise ShapeMismatch(f"rank {r} must lie in [1, min(d, k) = {min(d, k)}]")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @classmethod
    def init(cls, d: int, k: int, rank: int, rng: np.random.Generator) -> "LoraAdapter":
        return cls(rng.normal(0.0, INIT_STD, (rank, k)), np.zeros((d, rank)))


@dataclass(frozen=True)
class AttentionPoolParams(ParamSet):
    q: np.ndarray  # (d,)

    def __post_init__(self):
        if not np.all(np.isfinite(self.q)):
            raise ValueError("attention query must be finite")

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "AttentionPoolParams":
        return cls(rng.normal(0.0, INIT_STD, d))


@dataclass(frozen=True)
class LiteTransformerParams(ParamSet):
    cls_token: np.ndarray  # (d,)
    pos: np.ndarray        # (max_slices + 1, d), row 0 belongs to the CLS token
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    Wq: np.ndarray
    bq: np.ndarray
    Wk: np.ndarray
    bk: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    Wa: np.ndarray  # (ff, d)
    ba: np.ndarray
    Wb: np.ndarray  # (d, ff)
    bb: np.ndarray
    heads: int = _static(4)

    @property
    def max_slices(self) -> int:
        return self.pos.shape[0] - 1

    @classmethod
    def init(cls, d: int, max_slices: int, rng: np.random.Generator, heads: int = 4,
             ff_mult: int = 4) -> "LiteTransformerParams":
        if d % heads:
            raise ShapeMismatch(f"d = {d} is not divisible by {heads} heads")
        g = lambda *shape: rng.normal(0.0, INIT_STD, shape)  # noqa: E731
        ff = ff_mult * d
        return cls(
            cls_token=g(d), pos=g(max_slices + 1, d),
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            Wq=g(d, d), bq=np.zeros(d), Wk=g(d, d), bk=np.zeros(d),
            Wv=g(d, d), bv=np.zeros(d), Wo=g(d, d), bo=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            Wa=g(ff, d), ba=np.zeros(ff), Wb=g(d, ff), bb=np.zeros(d),
            heads=heads,
        )


@dataclass(frozen=True)
class ProjectorParams(ParamSet):
    ln_g: np.ndarray
    ln_b: np.ndarray
    W1: np.ndarray  # (h, d)
    b1: np.ndarray
    W2: np.ndarray  # (d, h)
    b2: np.ndarray
    dropout: float = _static(0.1)

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, hidden: int | None = None,
             dropout: float = 0.1) -> "ProjectorParams":
        h = hidden or d
        return cls(np.ones(d), np.zeros(d), rng.normal(0.0, INIT_STD, (h, d)), np.zeros(h),
                   rng.normal(0.0, INIT_STD, (d, h)), np.zeros(d), dropout)


def flatten(tree: dict) -> dict[str, np.ndarray]:
    """``{"proj": ProjectorParams, "log_tau": array}`` -> ``{"proj.W1": ..., "log_tau": ...}``."""
    flat = {}
    for name, value in tree.items():
        if value is None:
            continue
        if isinstance(value, ParamSet):
            for k, arr in value.arrays().items():
                flat[f"{name}.{k}"] = arr
        else:
            flat[name] = value
    return flat


def unflatten(flat: dict[str, np.ndarray], template: dict) -> dict:
    """Inverse of :func:`flatten`, taking static fields from ``template``."""
    out = {}
    for name, value in template.items():
        if isinstance(value, ParamSet):
            out[name] = value.replace(**{k: flat[f"{name}.{k}"] for k in value.arrays()})
        elif value is None:
            out[name] = None
        else:
            out[name] = flat[name]
    return out
