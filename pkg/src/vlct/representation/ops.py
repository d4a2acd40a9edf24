"""Slice aggregation, low-rank adaptation, residual projection and L2 normalisation."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..errors import EmptyInput, ShapeMismatch, TooManySlices, ZeroVector
from . import layers as L
from .params import AttentionPoolParams, LiteTransformerParams, LoraAdapter, ProjectorParams


def _stack(embeddings) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] == 0:
        raise EmptyInput(f"need a nonempty (S, d) stack of embeddings, got shape {E.shape}")
    return E


def aggregate_mean(embeddings) -> np.ndarray:
    E = _stack(embeddings)
    # exactly rounded column sums, so row order cannot change a single bit
    return np.array([math.fsum(col) for col in E.T]) / E.shape[0]


def aggregate_attention(embeddings, params: AttentionPoolParams, return_weights=False):
    E = _stack(embeddings)
    if params.q.shape != (E.shape[1],):
        raise ShapeMismatch(f"query has shape {params.q.shape}, embeddings have d = {E.shape[1]}")
    out, (_, _, alpha) = L.attention_pool_forward(E, params.q)
    return (out, alpha) if return_weights else out


def lite_transformer_forward(E, p: LiteTransformerParams):
    S, d = E.shape
    if S > p.max_slices:
        raise TooManySlices(f"{S} slices exceed the positional table ({p.max_slices})")
    X0 = np.vstack([p.cls_token[None], E]) + p.pos[: S + 1]
    a, c_ln1 = L.layernorm_forward(X0, p.ln1_g, p.ln1_b)
    m, c_mha = L.mha_forward(a, {k: getattr(p, k) for k in
                                 ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}, p.heads)
    H = X0 + m
    b, c_ln2 = L.layernorm_forward(H, p.ln2_g, p.ln2_b)
    f1, c_a = L.linear_forward(b, p.Wa, p.ba)
    g, c_g = L.gelu_forward(f1)
    f2, c_b = L.linear_forward(g, p.Wb, p.bb)
    Y = H + f2
    return Y[0], (S, p.pos.shape[0], c_ln1, c_mha, c_ln2, c_a, c_g, c_b)


def lite_transformer_backward(dout, cache):
    S, pos_len, c_ln1, c_mha, c_ln2, c_a, c_g, c_b = cache
    dY = np.zeros((S + 1, dout.shape[0]))
    dY[0] = dout
    grads = {}
    dg, grads["Wb"], grads["bb"] = L.linear_backward(dY, c_b)
    df1 = L.gelu_backward(dg, c_g)
    db, grads["Wa"], grads["ba"] = L.linear_backward(df1, c_a)
    dH_ln, grads["ln2_g"], grads["ln2_b"] = L.layernorm_backward(db, c_ln2)
    dH = dY + dH_ln
    da, g_mha = L.mha_backward(dH, c_mha)
    grads.update(g_mha)
    dX0_ln, grads["ln1_g"], grads["ln1_b"] = L.layernorm_backward(da, c_ln1)
    dX0 = dH + dX0_ln
    grads["cls_token"] = dX0[0]
    dpos = np.zeros((pos_len, dout.shape[0]))
    dpos[: S + 1] = dX0
    grads["pos"] = dpos
    return dX0[1:], grads


def aggregate_lite_transformer(embeddings, params: LiteTransformerParams) -> np.ndarray:
    """CLS readout of one pre-norm encoder layer over the slice sequence."""
    return lite_transformer_forward(_stack(embeddings), params)[0]


def lora_apply(Wx: Callable[[np.ndarray], np.ndarray], adapter: LoraAdapter, x) -> np.ndarray:
    """``Wx(x) + B (A x)``; the base map is only called, never modified."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != adapter.A.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, adapter expects {adapter.A.shape[1]}")
    base = np.asarray(Wx(x))
    if base.shape[-1] != adapter.B.shape[0]:
        raise ShapeMismatch(f"base output has {base.shape[-1]} features, B has {adapter.B.shape[0]} rows")
    return base + (x @ adapter.A.T) @ adapter.B.T


def lora_param_count(d: int, k: int, r: int) -> int:
    return r * (d + k)


def project_forward(X, p: ProjectorParams, mask=None):
    """Residual projector ``x + Dropout(W2 GELU(W1 LN(x) + b1) + b2)`` on rows of ``X``."""
    if X.shape[-1] != p.ln_g.shape[0]:
        raise ShapeMismatch(f"input dim {X.shape[-1]} != projector dim {p.ln_g.shape[0]}")
    a, c_ln = L.layernorm_forward(X, p.ln_g, p.ln_b)
    h, c1 = L.linear_forward(a, p.W1, p.b1)
    g, c_g = L.gelu_forward(h)
    z, c2 = L.linear_forward(g, p.W2, p.b2)
    if mask is not None:
        z = z * mask
    return X + z, (c_ln, c1, c_g, c2, mask)


def project_backward(dY, cache):
    c_ln, c1, c_g, c2, mask = cache
    dz = dY if mask is None else dY * mask
    grads = {}
    dg, grads["W2"], grads["b2"] = L.linear_backward(dz, c2)
    dh = L.gelu_backward(dg, c_g)
    da, grads["W1"], grads["b1"] = L.linear_backward(dh, c1)
    dX_ln, grads["ln_g"], grads["ln_b"] = L.layernorm_backward(da, c_ln)
    return dY + dX_ln, grads


def project(x, params: ProjectorParams, train_mode: bool = False, seed: int = 0) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mask = None
    if train_mode:
        mask = L.dropout_mask(X.shape, params.dropout, np.random.default_rng(seed))
    Y = project_forward(X, params, mask)[0]
    return Y.reshape(np.shape(x))


def l2_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ZeroVector("cannot normalise a zero vector")
    return x / norm
