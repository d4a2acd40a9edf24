"""Forward/backward pairs for the small set of layers the model uses.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Batches are row-major:
``X`` has shape (n, features) and linear weights are stored (out, in).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear_forward(X, W, b=None):
    Y = X @ W.T
    if b is not None:
        Y = Y + b
    return Y, (X, W)


def linear_backward(dY, cache):
    X, W = cache
    return dY @ W, dY.T @ X, dY.sum(axis=0)


def lora_forward(X, W, A, B):
    """``X W^T + (X A^T) B^T``; the base weight ``W`` is frozen."""
    H = X @ A.T
    return X @ W.T + H @ B.T, (X, W, A, B, H)


def lora_backward(dY, cache):
    X, W, A, B, H = cache
    dB = dY.T @ H
    dH = dY @ B
    dA = dH.T @ X
    dX = dY @ W + dH @ A
    return dX, dA, dB


def layernorm_forward(X, gamma, beta, eps=LN_EPS):
    mu = X.mean(axis=-1, keepdims=True)
    var = X.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(dY, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    dgamma = (dY * xhat).reshape(-1, n).sum(axis=0)
    dbeta = dY.reshape(-1, n).sum(axis=0)
    dxhat = dY * gamma
    dX = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dX, dgamma, dbeta


def gelu(X):
    """Exact GELU, ``x * Phi(x)``."""
    return X * 0.5 * (1.0 + erf(X * _INV_SQRT2))


def gelu_forward(X):
    cdf = 0.5 * (1.0 + erf(X * _INV_SQRT2))
    return X * cdf, (X, cdf)


def gelu_backward(dY, cache):
    X, cdf = cache
    pdf = _INV_SQRT2PI * np.exp(-0.5 * X * X)
    return dY * (cdf + X * pdf)


def dropout_mask(shape, rate: float, rng: np.random.Generator):
    if rate <= 0.0:
        return None
    keep = rng.uniform(size=shape) >= rate
    return keep / (1.0 - rate)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dP, P, axis=-1):
    return P * (dP - (dP * P).sum(axis=axis, keepdims=True))


def l2norm_forward(X):
    norm = np.linalg.norm(X, axis=-1, keepdims=True)
    Y = X / norm
    return Y, (Y, norm)


def l2norm_backward(dY, cache):
    Y, norm = cache
    return (dY - Y * (dY * Y).sum(axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# pooling / attention
# ---------------------------------------------------------------------------

def attention_pool_forward(E, q):
    """Softmax(q . e_i / sqrt(d)) weighted sum over the rows of ``E``."""
    d = E.shape[1]
    alpha = softmax(E @ q / math.sqrt(d))
    return alpha @ E, (E, q, alpha)


def attention_pool_backward(dout, cache):
    E, q, alpha = cache
    d = E.shape[1]
    g = E @ dout                      # d out / d alpha_i
    dlogit = alpha * (g - alpha @ g)  # softmax backward
    dE = np.outer(alpha, dout) + np.outer(dlogit, q) / math.sqrt(d)
    dq = dlogit @ E / math.sqrt(d)
    return dE, dq


def mha_forward(X, p: dict, heads: int):
    """Multi-head self-attention over the rows of ``X`` (T, d)."""
    T, d = X.shape
    dh = d // heads
    Q, cq = linear_forward(X, p["Wq"], p["bq"])
    K, ck = linear_forward(X, p["Wk"], p["bk"])
    V, cv = linear_forward(X, p["Wv"], p["bv"])
    split = lambda M: M.reshape(T, heads, dh).transpose(1, 0, 2)  # noqa: E731
    Qh, Kh, Vh = split(Q), split(K), split(V)
    scale = 1.0 / math.sqrt(dh)
    P = softmax(Qh @ Kh.transpose(0, 2, 1) * scale)
    Oh = P @ Vh
    O = Oh.transpose(1, 0, 2).reshape(T, d)
    out, co = linear_forward(O, p["Wo"], p["bo"])
    return out, (cq, ck, cv, co, Qh, Kh, Vh, P, scale, heads)


def mha_backward(dout, cache):
    cq, ck, cv, co, Qh, Kh, Vh, P, scale, heads = cache
    T, d = dout.shape
    dh = d // heads
    dO, dWo, dbo = linear_backward(dout, co)
    dOh = dO.reshape(T, heads, dh).transpose(1, 0, 2)
    dP = dOh @ Vh.transpose(0, 2, 1)
    dVh = P.transpose(0, 2, 1) @ dOh
    dS = softmax_backward(dP, P) * scale
    dQh = dS @ Kh
    dKh = dS.transpose(0, 2, 1) @ Qh
    merge = lambda M: M.transpose(1, 0, 2).reshape(T, d)  # noqa: E731
    dXq, dWq, dbq = linear_backward(merge(dQh), cq)
    dXk, dWk, dbk = linear_backward(merge(dKh), ck)
    dXv, dWv, dbv = linear_backward(merge(dVh), cv)
    grads = {"Wq": dWq, "bq": dbq, "Wk": dWk, "bk": dbk, "Wv": dWv, "bv": dbv,
             "Wo": dWo, "bo": dbo}
    return dXq + dXk + dXv, grads
