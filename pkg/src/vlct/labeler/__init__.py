"""Report normalization, rule-based activity labels, teacher votes and consensus."""

from .rules import (
    ActivityLabel,
    Mention,
    ReportDoc,
    RuleLexicon,
    classify_text,
    default_lexicon,
    normalize_impression,
    reconstruct_text,
    rule_classify,
)
from .teachers import (
    Confidence,
    ConsensusResult,
    HttpTeacher,
    ReplayTeacher,
    Vote,
    consensus,
    label_reports,
    parse_vote,
    teacher_vote,
)

__all__ = [
    "ActivityLabel", "Mention", "ReportDoc", "RuleLexicon", "classify_text",
    "default_lexicon", "normalize_impression", "reconstruct_text", "rule_classify",
    "Confidence", "ConsensusResult", "HttpTeacher", "ReplayTeacher", "Vote",
    "consensus", "label_reports", "parse_vote", "teacher_vote",
]
