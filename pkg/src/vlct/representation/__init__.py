"""Slice/text embeddings, slice aggregation, adapters and the residual projector."""

from .ops import (
    aggregate_attention,
    aggregate_lite_transformer,
    aggregate_mean,
    l2_normalize,
    lora_apply,
    lora_param_count,
    project,
)
from .params import (
    AttentionPoolParams,
    LiteTransformerParams,
    LoraAdapter,
    ProjectorParams,
)
from .providers import (
    FileSliceEmbeddings,
    FileTextEmbeddings,
    ToyTextEncoder,
    ToyVisionEncoder,
    embed_slices,
    embed_text,
)

__all__ = [
    "aggregate_attention", "aggregate_lite_transformer", "aggregate_mean", "l2_normalize",
    "lora_apply", "lora_param_count", "project",
    "AttentionPoolParams", "LiteTransformerParams", "LoraAdapter", "ProjectorParams",
    "FileSliceEmbeddings", "FileTextEmbeddings", "ToyTextEncoder", "ToyVisionEncoder",
    "embed_slices", "embed_text",
]
