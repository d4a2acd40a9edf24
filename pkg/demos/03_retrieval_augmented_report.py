"""Retrieve similar studies, diversify with MMR and draft an impression.

Usage: python3 demos/03_retrieval_augmented_report.py

Uses the offline nearest-example generator, so no network is needed. Set
``rag.generator`` to ``http`` in a run config to use a hosted model.
"""

import numpy as np

from vlct.rag import (
    EmbeddingIndex,
    GenerationRequest,
    MmrConfig,
    NearestExampleClient,
    ScriptedClient,
    assemble_prompt,
    generate_with_filter,
    index_topk,
    retrieve,
)

rng = np.random.default_rng(4)

library = [
    "Active terminal ileitis with mural hyperenhancement and wall thickening.",
    "Active terminal ileitis with wall thickening and mural hyperenhancement.",
    "Stricture of the neoterminal ileum with upstream dilatation.",
    "No evidence of active inflammatory bowel disease.",
    "Possible mild inflammation of the sigmoid colon, correlate endoscopically.",
]
# Embeddings: the first two studies are near duplicates of each other.
base = rng.normal(size=(4, 16))
vectors = np.vstack([base[0], base[0] + 0.01 * rng.normal(size=16), base[1], base[2], base[3]])
index = EmbeddingIndex.build(vectors, [f"S{i}" for i in range(5)], library)

query = base[0] + base[1]
print("plain top-3:")
for r in index_topk(index, query, 3):
    print(f"  {r.similarity:+.3f} {r.study_id} {r.impression}")

text_vectors = vectors  # stand-in text embeddings used for redundancy
print("MMR top-3 (lambda 0.7):")
picked = retrieve(index, query, MmrConfig(pool_size=5, k=3, lam=0.7), text_vectors)
for r in picked:
    print(f"  {r.similarity:+.3f} {r.study_id} {r.impression}")

prompt = assemble_prompt([r.impression for r in picked])
print("\nprompt:\n" + prompt)

result = generate_with_filter(GenerationRequest(prompt), NearestExampleClient())
print("\ngenerated:", result.text, f"(rounds={result.rounds}, degraded={result.degraded})")

# A model that only ever answers "OK." exhausts its retries and degrades.
bad = generate_with_filter(GenerationRequest(prompt, max_retries=3), ScriptedClient([["OK."] * 4]))
print("short replies:", repr(bad.text), f"rounds={bad.rounds} degraded={bad.degraded}")
