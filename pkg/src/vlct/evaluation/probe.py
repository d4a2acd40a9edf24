"""Class-weighted multinomial logistic probe on volume embeddings.

Objective (weights and biases ``W``, ``b``)::

    sum_i w[y_i] * CE(softmax(W x_i + b), y_i) + ||W||^2 / (2 C)

with balanced class weights ``w[c] = N / (K n_c)``. Solved by damped Newton
iterations with Armijo backtracking from a zero start, so the objective is
non-increasing along the logged trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from ..errors import DegenerateLabels, ShapeMismatch

N_CLASSES = 3


def balanced_class_weights(y, n_classes: int = N_CLASSES) -> np.ndarray:
    y = np.asarray(y)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    if np.any(counts == 0):
        raise DegenerateLabels(f"every class needs a sample, got counts {counts.tolist()}")
    return len(y) / (n_classes * counts)


@dataclass
class ProbeModel:
    W: np.ndarray  # (K, d)
    b: np.ndarray  # (K,)
    C: float
    class_weights: np.ndarray
    trace: list = field(default_factory=list)  # objective after each iteration
    grad_norm: float = np.nan

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X) @ self.W.T + self.b

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)


def _objective(theta, Xb, Y, sw, reg_mask, C):
    K = Y.shape[1]
    Wb = theta.reshape(K, -1)
    logp = log_softmax(Xb @ Wb.T, axis=1)
    f = -np.sum(sw * np.sum(Y * logp, axis=1)) + np.sum((Wb * reg_mask) ** 2) / (2 * C)
    P = np.exp(logp)
    G = ((P - Y) * sw[:, None]).T @ Xb + Wb * reg_mask / C
    return f, G.ravel(), P


def _hessian(Xb, P, sw, reg_mask, C):
    K, D = P.shape[1], Xb.shape[1]
    H = np.zeros((K * D, K * D))
    for a in range(K):
        for c in range(a, K):
            coef = sw * ((a == c) * P[:, a] - P[:, a] * P[:, c])
            block = (Xb * coef[:, None]).T @ Xb
            H[a * D:(a + 1) * D, c * D:(c + 1) * D] = block
            H[c * D:(c + 1) * D, a * D:(a + 1) * D] = block.T
    H[np.diag_indices_from(H)] += np.tile(reg_mask, K) / C
    return H


def probe_fit(X, y, C: float = 1.0, tol: float = 1e-6, max_iter: int = 100) -> ProbeModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] == 0 or X.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"need (N, d>0) features matching {y.shape[0]} labels, got {X.shape}")
    cw = balanced_class_weights(y)
    K = N_CLASSES
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    Y = np.eye(K)[y]
    sw = cw[y]
    reg_mask = np.r_[np.ones(X.shape[1]), 0.0]  # intercept is not penalised

    theta = np.zeros(K * Xb.shape[1])
    f, g, P = _objective(theta, Xb, Y, sw, reg_mask, C)
    trace = [f]
    for _ in range(max_iter):
        if np.linalg.norm(g) <= tol:
            break
        H = _hessian(Xb, P, sw, reg_mask, C)
        # softmax is invariant to a common bias shift, so H is singular there
        step = -np.linalg.lstsq(H, g, rcond=None)[0]
        slope = g @ step
        if slope >= 0:
            step, slope = -g, -(g @ g)
        t = 1.0
        while True:
            f_new, g_new, P_new = _objective(theta + t * step, Xb, Y, sw, reg_mask, C)
            if f_new <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if f_new > f:
            break
        theta, f, g, P = theta + t * step, f_new, g_new, P_new
        trace.append(f)
    Wb = theta.reshape(K, -1)
    return ProbeModel(Wb[:, :-1].copy(), Wb[:, -1].copy(), C, cw, trace, float(np.linalg.norm(g)))
