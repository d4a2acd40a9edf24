"""The multi-positive contrastive loss and the three slice aggregators.

Usage: python3 demos/02_loss_and_aggregators.py
"""

import numpy as np

from vlct.contrastive import build_positive_sets, multipositive_loss, multipositive_loss_and_grad
from vlct.representation import (
    AttentionPoolParams,
    LiteTransformerParams,
    aggregate_attention,
    aggregate_lite_transformer,
    aggregate_mean,
)

rng = np.random.default_rng(0)
np.set_printoptions(suppress=True, precision=4)

# --- loss -------------------------------------------------------------------
# Four studies; studies 0 and 2 share an impression, so they are positives
# for each other in both directions.
impressions = ["Active ileitis.", "No active disease.", "active ileitis", "Possible colitis."]
pos = build_positive_sets(impressions)
print("positive mask\n", pos.mask.astype(int))

v = rng.normal(size=(4, 8))
t = v + 1.0 * rng.normal(size=(4, 8))
v /= np.linalg.norm(v, axis=1, keepdims=True)
t /= np.linalg.norm(t, axis=1, keepdims=True)
S = v @ t.T

for tau in (1.0, 0.3, 0.1):
    print(f"tau={tau:<5} multi-positive {multipositive_loss(S, pos.mask, tau):.4f}"
          f"   diagonal-only {multipositive_loss(S, np.eye(4, dtype=bool), tau):.4f}")

loss, dS, dlogtau = multipositive_loss_and_grad(S, pos.mask, np.log(0.1))
print("gradient w.r.t. similarities\n", np.round(dS, 4), "\nd/dlog(tau):", round(dlogtau, 4))

# Treating duplicate impressions as negatives punishes the model for pairing
# study 0 with study 2's text. Merging them never raises the loss:
print("merged <= split:", multipositive_loss(S, pos.mask, 0.1) <= multipositive_loss(S, np.eye(4, dtype=bool), 0.1))

# --- aggregators -------------------------------------------------------------
E = rng.normal(size=(6, 16))                       # six slice embeddings
print("\nmean        ", np.round(aggregate_mean(E)[:4], 3))

q0 = AttentionPoolParams(np.zeros(16))             # a zero query is plain averaging
print("attn q=0    ", np.round(aggregate_attention(E, q0)[:4], 3))
q = AttentionPoolParams(E[2] * 2.0)                # a query aligned with slice 2
out, alpha = aggregate_attention(E, q, return_weights=True)
print("attn weights", np.round(alpha, 3))

p = LiteTransformerParams.init(16, 6, np.random.default_rng(1), heads=4)
a = aggregate_lite_transformer(E, p)
b = aggregate_lite_transformer(E[[1, 0, 2, 3, 4, 5]], p)
print("transformer is order aware:", not np.allclose(a, b))
print("mean is order blind:      ", np.allclose(aggregate_mean(E), aggregate_mean(E[::-1])))
