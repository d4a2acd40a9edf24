"""Best-of-N generation with a length/sentence quality filter.

A generation client returns a list of candidate texts for a request.
Each round asks for ``best_of`` candidates; a candidate survives when it
has at least 30 characters and at least one sentence (a maximal segment
ending in ``.``, ``!`` or ``?``). The survivor with the most sentences
wins, ties going to the client's order. When a whole round is rejected it
is repeated, up to ``max_retries`` extra rounds; after that the least-bad
candidate seen is returned with ``degraded=True``.
"""

from __future__ import annotations

import base64
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

from ..errors import GenerationUnavailable
from ..labeler.teachers import post_json
from .prompt import parse_prompt_examples

log = logging.getLogger(__name__)

MIN_CHARS = 30
_SENTENCE = re.compile(r"[^.!?]*[^.!?\s][^.!?]*[.!?]+")


@dataclass(frozen=True)
class DecodingParams:
    max_new_tokens: int = 240
    min_new_tokens: int = 48
    temperature: float = 0.6
    top_p: float = 0.9
    repetition_penalty: float = 1.08
    no_repeat_ngram_size: int = 3

    def __post_init__(self):
        if not self.max_new_tokens > self.min_new_tokens > 0:
            raise ValueError("need max_new_tokens > min_new_tokens > 0")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    decoding: DecodingParams = field(default_factory=DecodingParams)
    best_of: int = 4
    max_retries: int = 3
    image_png: bytes | None = None

    def __post_init__(self):
        if self.best_of < 1 or self.max_retries < 0:
            raise ValueError("best_of must be >= 1 and max_retries >= 0")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    degraded: bool
    rounds: int
    n_candidates: int


class GenerationClient(Protocol):
    def generate(self, req: GenerationRequest, n: int) -> list[str]:
        ...


def count_sentences(text: str) -> int:
    return len(_SENTENCE.findall(text))


def passes_filter(text: str) -> bool:
    return len(text.strip()) >= MIN_CHARS and count_sentences(text) >= 1


def generate_with_filter(req: GenerationRequest, client: GenerationClient) -> GenerationResult:
    seen: list[str] = []
    rounds = 0
    for _ in range(req.max_retries + 1):
        rounds += 1
        try:
            cands = [c.strip() for c in client.generate(req, req.best_of)]
        except GenerationUnavailable as exc:
            log.warning("generation round %d failed: %s", rounds, exc)
            continue
        seen += cands
        survivors = [c for c in cands if passes_filter(c)]
        if survivors:
            best = max(survivors, key=count_sentences)  # max keeps the first on ties
            return GenerationResult(best, False, rounds, len(seen))
    if not seen:
        raise GenerationUnavailable(f"no candidates produced in {rounds} rounds")
    # least bad: most sentences, then longest, then earliest
    best = max(seen, key=lambda c: (count_sentences(c), len(c)))
    log.warning("all %d candidates rejected; returning degraded output", len(seen))
    return GenerationResult(best, True, rounds, len(seen))


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------

@dataclass
class HttpGenerationClient:
    """Chat-completion endpoint configured from ``VLCT_GEN_BASE_URL``, ``_MODEL``, ``_API_KEY``.

    With ``multimodal=True`` a montage PNG attached to the request is sent
    as a base-64 data URL next to the prompt; otherwise it is dropped with a
    warning.
    """

    base_url: str
    model: str
    api_key: str | None = None
    multimodal: bool = False
    timeout: float = 120.0
    retries: int = 2
    backoff: float = 1.0

    @classmethod
    def from_env(cls, prefix: str = "VLCT_GEN", **kw) -> "HttpGenerationClient":
        base = os.environ.get(f"{prefix}_BASE_URL")
        model = os.environ.get(f"{prefix}_MODEL")
        if not base or not model:
            raise GenerationUnavailable(f"{prefix}_BASE_URL and {prefix}_MODEL must be set")
        return cls(base, model, os.environ.get(f"{prefix}_API_KEY"), **kw)

    def build_body(self, req: GenerationRequest, n: int) -> dict:
        content: str | list = req.prompt
        if req.image_png is not None:
            if self.multimodal:
                url = "data:image/png;base64," + base64.b64encode(req.image_png).decode()
                content = [{"type": "text", "text": req.prompt},
                           {"type": "image_url", "image_url": {"url": url}}]
            else:
                log.warning("endpoint is text-only; montage image omitted")
        d = req.decoding
        return {"model": self.model, "messages": [{"role": "user", "content": content}], "n": n,
                "max_tokens": d.max_new_tokens, "min_tokens": d.min_new_tokens,
                "temperature": d.temperature, "top_p": d.top_p,
                "repetition_penalty": d.repetition_penalty,
                "no_repeat_ngram_size": d.no_repeat_ngram_size}

    def generate(self, req: GenerationRequest, n: int) -> list[str]:
        data = post_json(f"{self.base_url.rstrip('/')}/chat/completions", self.build_body(req, n),
                         self.api_key, self.timeout, self.retries, self.backoff,
                         error=GenerationUnavailable)
        try:
            return [c["message"]["content"] or "" for c in data["choices"]]
        except (KeyError, TypeError) as exc:
            raise GenerationUnavailable(f"malformed completion payload: {exc}") from None


@dataclass
class NearestExampleClient:
    """Offline stand-in that answers with the retrieved examples from the prompt.

    Candidate i is the i-th reference impression, so best-of selection and
    the filter still run; this amounts to a nearest-neighbour report baseline.
    """

    def generate(self, req: GenerationRequest, n: int) -> list[str]:
        examples = parse_prompt_examples(req.prompt)
        if not examples:
            raise GenerationUnavailable("prompt carries no reference impressions")
        return examples[:n]


@dataclass
class ScriptedClient:
    """Deterministic client replaying fixed rounds of candidates (for tests and demos)."""

    rounds: Sequence[Sequence[str]]
    calls: int = 0

    def generate(self, req: GenerationRequest, n: int) -> list[str]:
        out = list(self.rounds[min(self.calls, len(self.rounds) - 1)])[:n]
        self.calls += 1
        return out


def request_record(req: GenerationRequest) -> dict:
    return {"decoding": asdict(req.decoding), "best_of": req.best_of,
            "max_retries": req.max_retries, "has_image": req.image_png is not None}
