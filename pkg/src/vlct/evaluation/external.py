"""Pluggable metrics computed by an external process.

Metrics that need large linguistic resources (synonym-aware METEOR,
BERTScore) are not implemented here. A provider process can supply them
over a pipe using this contract:

* The provider is started once with ``argv`` and reads UTF-8 JSON lines
  on stdin.
* Each request is ``{"id": int, "metric": str, "candidate": str,
  "reference": str}``.
* For each request the provider writes one line ``{"id": int,
  "value": float}`` on stdout, or ``{"id": int, "error": str}``.
* Closing stdin asks the provider to exit.
"""

from __future__ import annotations

import json
import subprocess
from typing import Protocol, Sequence

from ..errors import VlctError


class MetricProviderError(VlctError):
    pass


class MetricProvider(Protocol):
    name: str

    def score(self, candidates: Sequence[str], references: Sequence[str]) -> list[float]:
        ...


class SubprocessMetricProvider:
    """Speaks the JSON-lines contract with a child process, one request per pair."""

    def __init__(self, name: str, argv: Sequence[str], timeout: float = 60.0):
        self.name = name
        self.argv = list(argv)
        self.timeout = timeout

    def score(self, candidates: Sequence[str], references: Sequence[str]) -> list[float]:
        if len(candidates) != len(references):
            raise MetricProviderError("candidates and references differ in length")
        requests = "".join(
            json.dumps({"id": i, "metric": self.name, "candidate": c, "reference": r}) + "\n"
            for i, (c, r) in enumerate(zip(candidates, references))
        )
        proc = subprocess.run(self.argv, input=requests, capture_output=True, text=True,
                              timeout=self.timeout, check=False)
        if proc.returncode != 0:
            raise MetricProviderError(f"provider exited {proc.returncode}: {proc.stderr.strip()}")
        values: dict[int, float] = {}
        for line in proc.stdout.splitlines():
            if not line.strip():
                continue
            msg = json.loads(line)
            if "error" in msg:
                raise MetricProviderError(f"request {msg.get('id')}: {msg['error']}")
            values[int(msg["id"])] = float(msg["value"])
        missing = [i for i in range(len(candidates)) if i not in values]
        if missing:
            raise MetricProviderError(f"provider gave no answer for requests {missing[:5]}")
        return [values[i] for i in range(len(candidates))]
