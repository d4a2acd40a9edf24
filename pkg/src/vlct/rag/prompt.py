"""Deterministic generation prompt built from retrieved impressions.

Retrieved impressions are wrapped in ``<example id="n">...</example>``
blocks. Example text is HTML-escaped, so an impression that itself
contains ``<``, ``>`` or ``&`` can never close or forge a block;
``parse_prompt_examples`` inverts the escaping.
"""

from __future__ import annotations

import html
import re
from typing import Sequence

SYSTEM_ROLE = "You are an expert abdominal radiologist"

INSTRUCTIONS = (
    "Write the IMPRESSION section for the CT enterography study described below. "
    "Use the reference impressions from similar prior studies only as guidance for "
    "style and terminology. Do not copy any reference impression. "
    "Write 3-5 sentences focused on the activity of inflammatory bowel disease, "
    "and state complications such as abscess, fistula or stricture when present."
)

_EXAMPLE = re.compile(r'<example id="(\d+)">(.*?)</example>', re.DOTALL)


def assemble_prompt(impressions: Sequence[str], context: str | None = None) -> str:
    if not impressions:
        raise ValueError("need at least one retrieved impression")
    lines = [SYSTEM_ROLE + ".", "", INSTRUCTIONS, "", "Reference impressions:"]
    for n, text in enumerate(impressions, start=1):
        lines.append(f'<example id="{n}">{html.escape(text.strip(), quote=True)}</example>')
    if context:
        lines += ["", "Study context:", html.escape(context.strip(), quote=True)]
    lines += ["", "IMPRESSION:"]
    return "\n".join(lines)


def parse_prompt_examples(prompt: str) -> list[str]:
    """Retrieved impressions recovered from a prompt, in order."""
    found = [(int(i), html.unescape(body)) for i, body in _EXAMPLE.findall(prompt)]
    return [text for _, text in sorted(found, key=lambda t: t[0])]
