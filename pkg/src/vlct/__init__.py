"""Vision-language toolkit for CT enterography: volume encoding, slice aggregation,
multi-positive contrastive training, retrieval/ordinal evaluation, rule-based
pseudolabels and retrieval-augmented impression generation."""

__version__ = "0.1.0"
