"""Classification, ordinal and text-overlap metrics."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..errors import EmptyInput, LengthMismatch
from ..labeler.rules import ActivityLabel, RuleLexicon, classify_text

CLASS_NAMES = tuple(lab.key for lab in ActivityLabel)


def _labels(values) -> np.ndarray:
    return np.array([int(ActivityLabel.parse(v)) for v in values], dtype=np.int64)


def _pair(pred, true):
    if len(pred) != len(true):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(true)} labels")
    if len(pred) == 0:
        raise EmptyInput("no predictions to score")
    return _labels(pred), _labels(true)


def confusion_matrix(pred, true, n_classes: int = 3) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p, t = _pair(pred, true)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def classify_metrics(pred, true) -> dict:
    cm = confusion_matrix(pred, true)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(3), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(3), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(3), where=denom > 0)
    return {
        "accuracy": float(tp.sum() / cm.sum()),
        "precision": dict(zip(CLASS_NAMES, precision.tolist())),
        "recall": dict(zip(CLASS_NAMES, recall.tolist())),
        "f1": dict(zip(CLASS_NAMES, f1.tolist())),
        "macro_f1": float(f1.mean()),
        "confusion_matrix": cm.tolist(),
    }


# ---------------------------------------------------------------------------
# ordinal severity agreement
# ---------------------------------------------------------------------------

@dataclass
class OrdinalReport:
    exact: float
    mae: float
    within1: float
    chance_within1_prevalence: float
    chance_within1_uniform: float

    def to_dict(self) -> dict:
        return asdict(self)


def chance_within1(distribution) -> tuple[float, float]:
    """(prevalence-matched, uniform) within-1 accuracy of random guessing.

    Only normal/abnormal confusions are two steps apart, so the
    prevalence-matched rate is ``1 - 2 p0 p2`` and the uniform rate
    ``1 - (p0 + p2) / 3``.
    """
    p = np.asarray(distribution, dtype=np.float64)
    p = p / p.sum()
    return float(1 - 2 * p[0] * p[2]), float(1 - (p[0] + p[2]) / 3)


def ordinal_eval(pred, true, distribution=None) -> OrdinalReport:
    p, t = _pair(pred, true)
    if distribution is None:
        distribution = np.bincount(t, minlength=3)
    err = np.abs(p - t)
    prev, uni = chance_within1(distribution)
    return OrdinalReport(float(np.mean(err == 0)), float(err.mean()), float(np.mean(err <= 1)),
                         prev, uni)


def label_consistency(generated: Sequence[str], true_labels, lex: RuleLexicon | None = None,
                      distribution=None) -> dict:
    """Rule-classify generated impressions and score them against reference labels."""
    pred = [classify_text(g, lex) for g in generated]
    return {"ordinal": ordinal_eval(pred, true_labels, distribution).to_dict(),
            "classification": classify_metrics(pred, true_labels),
            "predicted": [lab.key for lab in pred]}


# ---------------------------------------------------------------------------
# text overlap
# ---------------------------------------------------------------------------

_EDGE_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace split, punctuation stripped from token edges."""
    out = []
    for tok in text.lower().split():
        tok = _EDGE_PUNCT.sub("", tok)
        if tok:
            out.append(tok)
    return out


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: str, reference: str) -> float:
    c, r = tokenize(candidate), tokenize(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_sentence(candidate: str, reference: str, max_order: int = 4) -> float:
    """Sentence BLEU on a 0-100 scale.

    Clipped n-gram precisions for orders 1-4; orders longer than the
    candidate are dropped (effective order); an order with no matches
    gets ``1 / (2^k * total)`` where k counts zero orders so far; brevity
    penalty ``min(1, exp(1 - |ref|/|cand|))``. A candidate sharing no
    unigram with the reference scores 0, as in SacreBLEU.
    """
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not set(c) & set(r):
        return 0.0
    log_sum, orders, zeros = 0.0, 0, 0
    for n in range(1, max_order + 1):
        cand = _ngrams(c, n)
        total = sum(cand.values())
        if total == 0:
            break
        ref = _ngrams(r, n)
        match = sum(min(k, ref[g]) for g, k in cand.items())
        if match == 0:
            zeros += 1
            prec = 1.0 / (2 ** zeros * total)
        else:
            prec = match / total
        log_sum += math.log(prec)
        orders += 1
    bp = 1.0 if len(c) >= len(r) else math.exp(1 - len(r) / len(c))
    return 100.0 * bp * math.exp(log_sum / orders)
