"""External LLM teacher votes and three-way consensus."""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Protocol, Sequence

from ..errors import TeacherUnavailable, UnparseableVote, WrongVoteCount
from .rules import ActivityLabel, ReportDoc, RuleLexicon, rule_classify

log = logging.getLogger(__name__)

_VOTE = re.compile(r"\b(possibly[\s_\-]+abnormal|abnormal|normal)\b", re.IGNORECASE)


def parse_vote(reply: str) -> ActivityLabel:
    """First taxonomy keyword in the reply; "possibly abnormal" wins over its substrings."""
    m = _VOTE.search(reply or "")
    if m is None:
        raise UnparseableVote(f"no taxonomy keyword in reply: {reply[:80]!r}")
    word = m.group(1).lower()
    if word.startswith("possibly"):
        return ActivityLabel.POSSIBLY_ABNORMAL
    return ActivityLabel.ABNORMAL if word == "abnormal" else ActivityLabel.NORMAL


def fewshot_prompt() -> str:
    return resources.files("vlct.labeler").joinpath("data/fewshot_prompt.txt").read_text()


def build_messages(doc: ReportDoc) -> list[dict]:
    report = f"FINDINGS:\n{doc.findings.strip()}\n\nIMPRESSION:\n{doc.impression.strip()}"
    return [
        {"role": "system", "content": fewshot_prompt()},
        {"role": "user", "content": report},
    ]


class Teacher(Protocol):
    name: str

    def reply(self, doc: ReportDoc) -> str: ...


@dataclass
class HttpTeacher:
    """Chat-completion endpoint configured from ``<PREFIX>_BASE_URL``, ``_MODEL``, ``_API_KEY``."""

    name: str
    base_url: str
    model: str
    api_key: str | None = None
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 1.0

    @classmethod
    def from_env(cls, name: str, prefix: str, **kw) -> "HttpTeacher":
        base = os.environ.get(f"{prefix}_BASE_URL")
        model = os.environ.get(f"{prefix}_MODEL")
        if not base or not model:
            raise TeacherUnavailable(f"{prefix}_BASE_URL and {prefix}_MODEL must be set")
        return cls(name, base, model, os.environ.get(f"{prefix}_API_KEY"), **kw)

    def reply(self, doc: ReportDoc) -> str:
        body = {"model": self.model, "messages": build_messages(doc), "temperature": 0}
        data = post_json(f"{self.base_url.rstrip('/')}/chat/completions", body,
                         self.api_key, self.timeout, self.retries, self.backoff,
                         error=TeacherUnavailable)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise UnparseableVote(f"{self.name}: malformed response {data!r:.200}") from exc


def post_json(url: str, body: dict, api_key: str | None, timeout: float, retries: int,
              backoff: float, error: type[Exception]) -> dict:
    """POST with retry; the audit log never contains the credential."""
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    payload = json.dumps(body).encode()
    last = None
    for attempt in range(retries + 1):
        log.debug("POST %s attempt=%d headers=%s body=%s", url, attempt,
                  {k: ("<redacted>" if k == "Authorization" else v) for k, v in headers.items()},
                  json.dumps(body)[:2000])
        req = urllib.request.Request(url, data=payload, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                text = resp.read().decode()
            log.debug("response %s: %s", url, text[:2000])
            return json.loads(text)
        except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
            last = exc
            if attempt < retries:
                time.sleep(backoff * (2 ** attempt))
    raise error(f"{url} unreachable after {retries + 1} attempts: {last}")


@dataclass
class ReplayTeacher:
    """Offline teacher serving recorded replies keyed by study id."""

    name: str
    replies: dict[str, str]

    def reply(self, doc: ReportDoc) -> str:
        try:
            return self.replies[doc.study_id]
        except KeyError:
            raise TeacherUnavailable(f"{self.name}: no recorded reply for {doc.study_id}") from None


def teacher_vote(doc: ReportDoc, teacher: Teacher) -> ActivityLabel:
    return parse_vote(teacher.reply(doc))


class Confidence(str, Enum):
    HIGH = "high"
    MEDIUM = "medium"
    ABSTAIN = "abstain"


@dataclass(frozen=True)
class Vote:
    teacher: str
    label: ActivityLabel | None  # None when the teacher failed


@dataclass
class ConsensusResult:
    label: ActivityLabel | None
    confidence: Confidence
    votes: tuple = field(default_factory=tuple)

    @property
    def abstained(self) -> bool:
        return self.confidence is Confidence.ABSTAIN

    def to_record(self, study_id: str) -> dict:
        return {
            "study_id": study_id,
            "label": None if self.label is None else self.label.key,
            "confidence": self.confidence.value,
            "votes": [{"teacher": v.teacher, "label": None if v.label is None else v.label.key}
                      for v in self.votes],
        }


def consensus(votes: Sequence) -> ConsensusResult:
    """Majority vote over exactly three teachers.

    Accepts labels or :class:`Vote` objects. A failed teacher (``None``)
    never matches another vote.
    """
    if len(votes) != 3:
        raise WrongVoteCount(f"consensus needs exactly 3 votes, got {len(votes)}")
    votes = tuple(v if isinstance(v, Vote) else Vote(f"teacher{i}", v)
                  for i, v in enumerate(votes))
    labels = [v.label for v in votes]
    for cand in labels:
        if cand is None:
            continue
        n = labels.count(cand)
        if n == 3:
            return ConsensusResult(cand, Confidence.HIGH, votes)
        if n == 2:
            return ConsensusResult(cand, Confidence.MEDIUM, votes)
    return ConsensusResult(None, Confidence.ABSTAIN, votes)


def _safe_vote(doc: ReportDoc, teacher: Teacher) -> Vote:
    try:
        return Vote(teacher.name, teacher_vote(doc, teacher))
    except (TeacherUnavailable, UnparseableVote) as exc:
        log.warning("%s failed on %s: %s", teacher.name, doc.study_id, exc)
        return Vote(teacher.name, None)


def label_reports(docs: Sequence[ReportDoc], teachers: Sequence[Teacher],
                  lex: RuleLexicon | None = None, max_workers: int = 4) -> list[ConsensusResult]:
    """Rule vote plus two teacher votes per report, fanned out over a bounded pool.

    Results keep input order; each report's consensus is formed only once
    both teachers have answered or failed.
    """
    if len(teachers) != 2:
        raise WrongVoteCount(f"expected 2 external teachers, got {len(teachers)}")
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [[pool.submit(_safe_vote, doc, t) for t in teachers] for doc in docs]
        results = []
        for doc, futs in zip(docs, futures):
            rule = Vote("rules", rule_classify(doc, lex)[0])
            results.append(consensus([rule] + [f.result() for f in futs]))
    return results
