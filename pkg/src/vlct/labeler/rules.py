"""Negation/uncertainty-scoped rule classifier for radiology impressions.

Each concept mention gets one context:

* ``uncertain``  an uncertainty trigger appears anywhere in its sentence
* ``negated``    a negation trigger ends within the 6 tokens before it
* ``historical`` a historical trigger precedes it and no acute trigger co-occurs
* ``acute``      a non-negated acute trigger appears in the sentence
* ``present``    none of the above

Checks run in that order, so hedged negations ("cannot exclude") count as
uncertain. A termination word ("but", "however") between a trigger and a
concept closes the negation/historical scope.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from importlib import resources
from pathlib import Path

from ..errors import LexiconError

NEGATION_WINDOW = 6

_TOKEN = re.compile(r"[a-z0-9]+(?:['\-][a-z0-9]+)*")
_SENTENCE_END = re.compile(r"[.!?;]+(?=\s|$)|\n+")


class ActivityLabel(IntEnum):
    NORMAL = 0
    POSSIBLY_ABNORMAL = 1
    ABNORMAL = 2

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "ActivityLabel":
        if isinstance(value, ActivityLabel):
            return value
        if isinstance(value, int):
            return cls(value)
        return cls[str(value).strip().upper().replace(" ", "_")]


def normalize_impression(text: str) -> str:
    """Lowercase, collapse whitespace, drop terminal ``.``, ``!`` or ``;``."""
    text = " ".join(text.lower().split())
    return text.rstrip(".!; ").strip()


@dataclass(frozen=True)
class RuleLexicon:
    negation: tuple[str, ...]
    uncertainty: tuple[str, ...]
    historical: tuple[str, ...]
    acute: tuple[str, ...]
    concepts: dict[str, tuple[str, ...]]
    hedging: tuple[str, ...] = ()
    termination: tuple[str, ...] = ()

    REQUIRED_CONCEPTS = ("inflammation", "objective_findings", "complications")

    def __post_init__(self):
        for name in ("negation", "uncertainty", "historical", "acute"):
            if not getattr(self, name):
                raise LexiconError(f"lexicon section '{name}' is empty")
        for name in self.REQUIRED_CONCEPTS:
            if not self.concepts.get(name):
                raise LexiconError(f"lexicon concept group '{name}' is empty")
        groups = [self.negation, self.uncertainty, self.historical, self.acute,
                  self.hedging, self.termination, *self.concepts.values()]
        for terms in groups:
            for t in terms:
                if t != " ".join(t.lower().split()) or not t:
                    raise LexiconError(f"term {t!r} is not lowercase/whitespace-normalized")

    @classmethod
    def from_text(cls, text: str) -> "RuleLexicon":
        sections: dict[str, list[str]] = {}
        current = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip().lower()
                sections.setdefault(current, [])
                continue
            if current is None:
                raise LexiconError(f"term {line!r} appears before any section header")
            sections[current].append(" ".join(line.lower().split()))
        concepts = {k.split(":", 1)[1]: tuple(v) for k, v in sections.items()
                    if k.startswith("concept:")}
        return cls(
            negation=tuple(sections.get("negation", ())),
            uncertainty=tuple(sections.get("uncertainty", ())),
            historical=tuple(sections.get("historical", ())),
            acute=tuple(sections.get("acute", ())),
            hedging=tuple(sections.get("hedging", ())),
            termination=tuple(sections.get("termination", ())),
            concepts=concepts,
        )

    @classmethod
    def from_file(cls, path) -> "RuleLexicon":
        return cls.from_text(Path(path).read_text())

    def all_terms(self) -> set[str]:
        out = set(self.negation) | set(self.uncertainty) | set(self.historical)
        out |= set(self.acute) | set(self.hedging) | set(self.termination)
        for terms in self.concepts.values():
            out |= set(terms)
        return out


@lru_cache(maxsize=1)
def default_lexicon() -> RuleLexicon:
    text = resources.files("vlct.labeler").joinpath("data/lexicon.txt").read_text()
    return RuleLexicon.from_text(text)


@dataclass(frozen=True)
class Mention:
    section: str
    sentence: int
    concept: str | None  # None for a sentence-level hedge
    category: str
    context: str
    trigger: str | None = None


@dataclass
class ReportDoc:
    study_id: str
    findings: str
    impression: str
    normalized_impression: str = field(init=False)

    def __post_init__(self):
        self.normalized_impression = normalize_impression(self.impression)


def split_sentences(text: str) -> list[list[str]]:
    out = []
    for chunk in _SENTENCE_END.split(text.lower()):
        tokens = _TOKEN.findall(chunk)
        if tokens:
            out.append(tokens)
    return out


def _find(tokens: list[str], terms) -> list[tuple[int, int, str]]:
    """All (start, end, term) occurrences, longest terms claiming tokens first."""
    hits, taken = [], set()
    for term in sorted(terms, key=lambda t: (-len(t.split()), t)):
        words = term.split()
        n = len(words)
        for i in range(len(tokens) - n + 1):
            if tokens[i:i + n] == words and not taken.intersection(range(i, i + n)):
                hits.append((i, i + n, term))
                taken.update(range(i, i + n))
    return sorted(hits)


def _scope_open(tokens, start, end, terminators) -> bool:
    return not any(tok in terminators for tok in tokens[start:end])


def _negated_at(pos, negations, tokens, terminators) -> list:
    return [t for t in negations
            if t[1] <= pos and t[0] >= pos - NEGATION_WINDOW
            and _scope_open(tokens, t[1], pos, terminators)]


def sentence_mentions(tokens: list[str], lex: RuleLexicon, section: str,
                      sentence: int) -> list[Mention]:
    uncertain = _find(tokens, lex.uncertainty)
    negations = _find(tokens, lex.negation)
    historical = _find(tokens, lex.historical)
    acute = [a for a in _find(tokens, lex.acute)
             if not _negated_at(a[0], negations, tokens, set(lex.termination))]
    hedges = _find(tokens, lex.hedging)
    terminators = set(lex.termination)

    mentions = []
    concept_terms = {t: cat for cat, terms in lex.concepts.items() for t in terms}
    for c0, c1, term in _find(tokens, concept_terms):
        category = concept_terms[term]
        neg = _negated_at(c0, negations, tokens, terminators)
        hist = [t for t in historical
                if t[1] <= c0 and _scope_open(tokens, t[1], c0, terminators)]
        if uncertain:
            ctx, trig = "uncertain", uncertain[0][2]
        elif neg:
            ctx, trig = "negated", neg[-1][2]
        elif hist and not acute:
            ctx, trig = "historical", hist[-1][2]
        elif acute:
            ctx, trig = "acute", acute[0][2]
        else:
            ctx, trig = "present", None
        mentions.append(Mention(section, sentence, term, category, ctx, trig))

    if not mentions:
        for _, _, term in uncertain + hedges:
            mentions.append(Mention(section, sentence, None, "hedge", "hedge", term))
            break
    elif hedges:
        mentions.append(Mention(section, sentence, None, "hedge", "hedge", hedges[0][2]))
    return mentions


def decide(mentions: list[Mention]) -> ActivityLabel:
    definite = False
    possible = False
    for m in mentions:
        if m.category == "hedge" or m.context in ("uncertain", "historical"):
            possible = True
        elif m.context in ("present", "acute"):
            if m.category in ("inflammation", "complications") or m.context == "acute":
                definite = True
            else:
                possible = True
    if definite:
        return ActivityLabel.ABNORMAL
    if possible:
        return ActivityLabel.POSSIBLY_ABNORMAL
    return ActivityLabel.NORMAL


def rule_classify(doc: ReportDoc, lex: RuleLexicon | None = None
                  ) -> tuple[ActivityLabel, list[Mention]]:
    """Classify a report; returns the label and every mention with its context.

    The impression is scanned first; an Abnormal impression short-circuits
    the findings section.
    """
    lex = lex or default_lexicon()
    trace: list[Mention] = []
    for section, text in (("impression", doc.impression), ("findings", doc.findings)):
        for k, tokens in enumerate(split_sentences(text or "")):
            trace.extend(sentence_mentions(tokens, lex, section, k))
        if section == "impression" and decide(trace) is ActivityLabel.ABNORMAL:
            break
    return decide(trace), trace


def classify_text(text: str, lex: RuleLexicon | None = None) -> ActivityLabel:
    return rule_classify(ReportDoc("", "", text), lex)[0]


def reconstruct_text(trace: list[Mention]) -> str:
    """Minimal impression that re-creates every mention context in ``trace``."""
    parts = []
    for m in trace:
        if m.concept is None:
            parts.append(f"{m.trigger}.")
        elif m.trigger is None:
            parts.append(f"{m.concept}.")
        else:
            parts.append(f"{m.trigger} {m.concept}.")
    return " ".join(parts)
