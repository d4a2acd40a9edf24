"""Positive sets, the multi-positive contrastive loss, and the training loop."""

from .checkpoint import load_checkpoint, save_checkpoint
from .loss import PositiveSets, build_positive_sets, multipositive_loss, multipositive_loss_and_grad
from .model import AGGREGATORS, Batch, Frozen, ModelSpec, init_params, loss_and_grads
from .train import AdamW, EarlyStopping, StudyItem, TrainConfig, TrainResult, train

__all__ = [
    "load_checkpoint", "save_checkpoint", "PositiveSets", "build_positive_sets",
    "multipositive_loss", "multipositive_loss_and_grad", "AGGREGATORS", "Batch", "Frozen",
    "ModelSpec", "init_params", "loss_and_grads", "AdamW", "EarlyStopping", "StudyItem",
    "TrainConfig", "TrainResult", "train",
]
