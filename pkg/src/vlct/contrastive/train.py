"""AdamW training loop with global gradient clipping and early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import EmptySplit
from .loss import build_positive_sets
from .model import Batch, Frozen, ModelSpec, batch_loss, flatten, init_params, loss_and_grads, unflatten

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-2
    batch_size: int = 8
    max_epochs: int = 10
    patience: int = 3
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "weight_decay", "batch_size", "max_epochs", "patience", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class StudyItem:
    """Frozen per-study inputs for training: slice and text features plus the impression."""

    study_id: str
    slice_feats: np.ndarray
    text_feats: np.ndarray
    impression: str


# parameters that never receive decoupled weight decay
_NO_DECAY = ("log_tau",)


class AdamW:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, flat: dict, grads: dict) -> dict:
        cfg = self.cfg
        b1, b2 = cfg.betas
        self.t += 1
        out = {}
        for k, p in flat.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.m.get(k, np.zeros_like(g)) * b1 + (1 - b1) * g
            v = self.v.get(k, np.zeros_like(g)) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            new = p if k in _NO_DECAY else p * (1 - cfg.lr * cfg.weight_decay)
            out[k] = new - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        return out


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


class EarlyStopping:
    """Tracks the best (lowest) validation loss; ties keep the earlier epoch."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def make_batch(items: Sequence[StudyItem]) -> Batch:
    return Batch(
        [it.slice_feats for it in items],
        np.stack([it.text_feats for it in items]),
        build_positive_sets([it.impression for it in items]),
    )


def evaluate_loss(params, frozen, spec, items: Sequence[StudyItem], batch_size: int) -> float:
    """Mean of per-batch losses over fixed-order batches, weighted by batch size."""
    total, count = 0.0, 0
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        total += batch_loss(params, frozen, spec, make_batch(chunk)) * len(chunk)
        count += len(chunk)
    return total / count


@dataclass
class TrainResult:
    params: dict
    best_epoch: int
    history: list = field(default_factory=list)
    stopped_early: bool = False


def train(train_items: Sequence[StudyItem], val_items: Sequence[StudyItem], spec: ModelSpec,
          frozen: Frozen, cfg: TrainConfig = TrainConfig(), params: dict | None = None,
          metrics_path=None) -> TrainResult:
    """Fit the adapters, aggregator, projector and temperature.

    Epoch 0 in the history is the untrained model. The returned parameters
    are those of the epoch with the lowest validation loss.
    """
    if not train_items or not val_items:
        raise EmptySplit("train and validation splits must both be nonempty")
    overlap = {it.study_id for it in train_items} & {it.study_id for it in val_items}
    if overlap:
        raise EmptySplit(f"train/validation share study ids: {sorted(overlap)[:5]}")

    params = params or init_params(spec, frozen, cfg.seed)
    opt = AdamW(cfg)
    stopper = EarlyStopping(cfg.patience)
    history = []
    metrics_fh = open(metrics_path, "a") if metrics_path else None

    def record(epoch, train_loss, val_loss):
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "tau": math.exp(float(params["log_tau"]))}
        history.append(row)
        log.info("epoch %d train %.4f val %.4f tau %.4f", epoch, train_loss, val_loss, row["tau"])
        if metrics_fh:
            metrics_fh.write(json.dumps(row) + "\n")
            metrics_fh.flush()

    record(0, evaluate_loss(params, frozen, spec, train_items, cfg.batch_size),
           evaluate_loss(params, frozen, spec, val_items, cfg.batch_size))
    best_params, stopped = params, False
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(train_items))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = make_batch([train_items[i] for i in order[start:start + cfg.batch_size]])
                loss, grads = loss_and_grads(params, frozen, spec, batch, rng)
                grads, _ = clip_global_norm(grads, cfg.clip_norm)
                params = unflatten(opt.step(flatten(params), grads), params)
                losses.append(loss * batch.n)
            train_loss = float(sum(losses) / len(order))
            val_loss = evaluate_loss(params, frozen, spec, val_items, cfg.batch_size)
            record(epoch, train_loss, val_loss)
            stop = stopper.update(epoch, val_loss)
            if stopper.best_epoch == epoch:
                best_params = params
            if stop:
                stopped = True
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(best_params, stopper.best_epoch, history, stopped)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
