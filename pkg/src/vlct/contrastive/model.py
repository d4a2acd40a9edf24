"""Two-tower contrastive model: forward pass, loss and hand-derived gradients.

Vision: frozen slice features -> adapted linear -> aggregator -> residual
projector -> L2 norm. Text: frozen bag-of-words features -> adapted linear
-> (optional projector) -> L2 norm. Similarities ``V @ T.T`` feed the
multi-positive loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..errors import NonFiniteGradient
from ..representation import layers as L
from ..representation import ops
from ..representation.params import (
    AttentionPoolParams,
    LiteTransformerParams,
    LoraAdapter,
    ProjectorParams,
    flatten,
    unflatten,
)
from .loss import PositiveSets, multipositive_loss, multipositive_loss_and_grad

AGGREGATORS = ("mean", "attention", "lite_transformer")


@dataclass(frozen=True)
class ModelSpec:
    d: int = 512
    aggregator: str = "mean"
    vision_rank: int = 8
    text_rank: int = 8
    max_slices: int = 28
    heads: int = 4
    projector_hidden: int | None = None
    dropout: float = 0.1
    project_text: bool = False
    tau_init: float = 0.07

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Frozen:
    """Frozen base weights of the two adapted linear layers."""

    vision_W: np.ndarray  # (d, k_v)
    text_W: np.ndarray    # (d, k_t)


def init_params(spec: ModelSpec, frozen: Frozen, seed: int) -> dict:
    rng = np.random.default_rng([seed, 0xA11])
    d = spec.d
    agg = None
    if spec.aggregator == "attention":
        agg = AttentionPoolParams.init(d, rng)
    elif spec.aggregator == "lite_transformer":
        agg = LiteTransformerParams.init(d, spec.max_slices, rng, heads=spec.heads)
    return {
        "vision_lora": LoraAdapter.init(d, frozen.vision_W.shape[1], spec.vision_rank, rng),
        "text_lora": LoraAdapter.init(d, frozen.text_W.shape[1], spec.text_rank, rng),
        "agg": agg,
        "proj": ProjectorParams.init(d, rng, spec.projector_hidden, spec.dropout),
        "text_proj": (ProjectorParams.init(d, rng, spec.projector_hidden, spec.dropout)
                      if spec.project_text else None),
        "log_tau": np.array(math.log(spec.tau_init)),
    }


@dataclass
class Batch:
    slice_feats: list  # per study, (S_i, k_v) frozen slice features
    text_feats: np.ndarray  # (N, k_t)
    positives: PositiveSets

    @property
    def n(self) -> int:
        return len(self.slice_feats)


def _aggregate_forward(kind, E, agg):
    if kind == "mean":
        return ops.aggregate_mean(E), E.shape[0]
    if kind == "attention":
        return L.attention_pool_forward(E, agg.q)
    return ops.lite_transformer_forward(E, agg)


def _aggregate_backward(kind, dv, cache):
    if kind == "mean":
        return np.broadcast_to(dv / cache, (cache, dv.shape[0])), {}
    if kind == "attention":
        dE, dq = L.attention_pool_backward(dv, cache)
        return dE, {"q": dq}
    return ops.lite_transformer_backward(dv, cache)


def encode_volumes(params, frozen: Frozen, spec: ModelSpec, slice_feats: Sequence,
                   masks=None, keep_cache: bool = False):
    """Unit-norm volume embeddings (N, d)."""
    lo = params["vision_lora"]
    sizes = [z.shape[0] for z in slice_feats]
    E_all, c_lora = L.lora_forward(np.concatenate(slice_feats), frozen.vision_W, lo.A, lo.B)
    splits = np.cumsum(sizes)[:-1]
    pooled, c_agg = [], []
    for E in np.split(E_all, splits):
        v, c = _aggregate_forward(spec.aggregator, E, params["agg"])
        pooled.append(v)
        c_agg.append(c)
    V1, c_proj = ops.project_forward(np.stack(pooled), params["proj"], masks)
    V, c_norm = L.l2norm_forward(V1)
    cache = (c_lora, splits, c_agg, c_proj, c_norm) if keep_cache else None
    return V, cache


def encode_texts(params, frozen: Frozen, spec: ModelSpec, text_feats, mask=None,
                 keep_cache: bool = False):
    lo = params["text_lora"]
    T0, c_lora = L.lora_forward(np.asarray(text_feats), frozen.text_W, lo.A, lo.B)
    c_proj = None
    if params.get("text_proj") is not None:
        T0, c_proj = ops.project_forward(T0, params["text_proj"], mask)
    T, c_norm = L.l2norm_forward(T0)
    return T, ((c_lora, c_proj, c_norm) if keep_cache else None)


def loss_and_grads(params: dict, frozen: Frozen, spec: ModelSpec, batch: Batch,
                   rng: np.random.Generator | None = None):
    """Batch loss and gradients (flat ``"group.field"`` keys) for all trainable arrays.

    Dropout masks are drawn from ``rng`` when given (training); otherwise the
    projector runs in eval mode.
    """
    n = batch.n
    vmask = tmask = None
    if rng is not None:
        vmask = L.dropout_mask((n, spec.d), params["proj"].dropout, rng)
        if params.get("text_proj") is not None:
            tmask = L.dropout_mask((n, spec.d), params["text_proj"].dropout, rng)
    V, vc = encode_volumes(params, frozen, spec, batch.slice_feats, vmask, keep_cache=True)
    T, tc = encode_texts(params, frozen, spec, batch.text_feats, tmask, keep_cache=True)
    s = V @ T.T
    loss, ds, dlog_tau = multipositive_loss_and_grad(s, batch.positives, float(params["log_tau"]))

    grads = {"log_tau": np.array(dlog_tau)}
    # vision tower
    c_lora, splits, c_agg, c_proj, c_norm = vc
    dV1 = L.l2norm_backward(ds @ T, c_norm)
    dpooled, g = ops.project_backward(dV1, c_proj)
    grads.update({f"proj.{k}": v for k, v in g.items()})
    dE_parts, agg_grads = [], {}
    for dv, cache in zip(dpooled, c_agg):
        dE, g = _aggregate_backward(spec.aggregator, dv, cache)
        dE_parts.append(dE)
        for k, v in g.items():
            agg_grads[k] = agg_grads[k] + v if k in agg_grads else v
    grads.update({f"agg.{k}": v for k, v in agg_grads.items()})
    _, dA, dB = L.lora_backward(np.concatenate(dE_parts), c_lora)
    grads["vision_lora.A"], grads["vision_lora.B"] = dA, dB
    # text tower
    t_lora, t_proj, t_norm = tc
    dT0 = L.l2norm_backward(ds.T @ V, t_norm)
    if t_proj is not None:
        dT0, g = ops.project_backward(dT0, t_proj)
        grads.update({f"text_proj.{k}": v for k, v in g.items()})
    _, dA, dB = L.lora_backward(dT0, t_lora)
    grads["text_lora.A"], grads["text_lora.B"] = dA, dB

    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradient(f"non-finite gradient in {k}")
    return loss, grads


def batch_loss(params, frozen, spec, batch: Batch, rng=None) -> float:
    """Loss only; with the same ``rng`` state it matches :func:`loss_and_grads`."""
    n = batch.n
    vmask = tmask = None
    if rng is not None:
        vmask = L.dropout_mask((n, spec.d), params["proj"].dropout, rng)
        if params.get("text_proj") is not None:
            tmask = L.dropout_mask((n, spec.d), params["text_proj"].dropout, rng)
    V, _ = encode_volumes(params, frozen, spec, batch.slice_feats, vmask)
    T, _ = encode_texts(params, frozen, spec, batch.text_feats, tmask)
    return multipositive_loss(V @ T.T, batch.positives, math.exp(float(params["log_tau"])))


__all__ = ["AGGREGATORS", "Batch", "Frozen", "ModelSpec", "batch_loss", "encode_texts",
           "encode_volumes", "flatten", "init_params", "loss_and_grads", "unflatten"]
