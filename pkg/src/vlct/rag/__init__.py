"""Volume-embedding retrieval, MMR diversification, prompting and filtered generation."""

from .generate import (
    DecodingParams,
    GenerationRequest,
    GenerationResult,
    HttpGenerationClient,
    NearestExampleClient,
    ScriptedClient,
    count_sentences,
    generate_with_filter,
    passes_filter,
)
from .index import EmbeddingIndex, MmrConfig, Retrieved, index_topk, mmr_select, retrieve
from .prompt import SYSTEM_ROLE, assemble_prompt, parse_prompt_examples

__all__ = [
    "DecodingParams", "GenerationRequest", "GenerationResult", "HttpGenerationClient",
    "NearestExampleClient", "ScriptedClient", "count_sentences", "generate_with_filter",
    "passes_filter", "EmbeddingIndex", "MmrConfig", "Retrieved", "index_topk", "mmr_select",
    "retrieve", "SYSTEM_ROLE", "assemble_prompt", "parse_prompt_examples",
]
