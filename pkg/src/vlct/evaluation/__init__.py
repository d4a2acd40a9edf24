"""Retrieval, probe, classification, ordinal and text-overlap evaluation."""

from .external import MetricProvider, SubprocessMetricProvider
from .metrics import (
    OrdinalReport,
    bleu_sentence,
    chance_within1,
    classify_metrics,
    confusion_matrix,
    label_consistency,
    ordinal_eval,
    rouge_l_f1,
    tokenize,
)
from .probe import ProbeModel, balanced_class_weights, probe_fit
from .report import EvalReport
from .retrieval import (
    equivalence_classes,
    expected_reciprocal_rank,
    random_mrr,
    retrieval_both,
    retrieval_eval,
)

__all__ = [
    "MetricProvider", "SubprocessMetricProvider", "OrdinalReport", "bleu_sentence",
    "chance_within1", "classify_metrics", "confusion_matrix", "label_consistency",
    "ordinal_eval", "rouge_l_f1", "tokenize", "ProbeModel", "balanced_class_weights",
    "probe_fit", "EvalReport", "equivalence_classes", "expected_reciprocal_rank",
    "random_mrr", "retrieval_both", "retrieval_eval",
]
