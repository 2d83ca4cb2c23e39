"""Training cycle with early stopping, evaluation and accuracy."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import Dataset

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 50  # T, the per-cycle epoch cap
    patience: int = 10
    val_fraction: float = 0.1


@dataclass
class TrainResult:
    epochs: int
    best_val: float
    history: list[float] = field(default_factory=list)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float((predictions == labels).mean())


def predict(model, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    if hasattr(model, "eval"):
        model.eval()
    out = []
    with ag.no_grad():
        for x, _ in dataset.batches(batch_size, shuffle=False):
            logits = model(x)
            out.append(np.argmax(logits.data if isinstance(logits, ag.Tensor) else logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, dataset: Dataset, batch_size: int = 128) -> float:
    return accuracy(predict(model, dataset, batch_size), dataset.labels)


def train_epoch(model, data: Dataset, state: ag.AdamState, batch_size: int, seed: int, epoch: int) -> float:
    model.train()
    total, count = 0.0, 0
    for x, y in data.batches(batch_size, seed=seed, epoch=epoch):
        if len(y) < 2:
            continue  # batch norm needs two values per channel
        model.store.zero_grad()
        loss = ag.softmax_cross_entropy(model(x), y)
        value = loss.item()
        if not math.isfinite(value):
            ag.get_tape().clear()
            raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch}")
        ag.backward(loss)
        ag.adam_step(model.store, state)
        total += value * len(y)
        count += len(y)
    return total / max(count, 1)


def train_cycle(model, train_set: Dataset, cfg: TrainConfig, seed: int, epoch_offset: int = 0) -> TrainResult:
    """Train for up to ``cfg.epochs`` epochs with early stopping on a holdout.

    The holdout is a stratified ``cfg.val_fraction`` slice of ``train_set``.
    Weights and batch-norm buffers from the best validation epoch are
    restored at the end. ``epoch_offset`` keeps shuffles distinct across
    successive cycles of the same run.
    """
    fit, val = train_set.split_validation(cfg.val_fraction, seed)
    state = ag.AdamState(lr=cfg.lr)
    best, best_state, since = -1.0, None, 0
    history = []
    for e in range(cfg.epochs):
        loss = train_epoch(model, fit, state, cfg.batch_size, seed, epoch_offset + e)
        score = evaluate(model, val) if len(val) else -loss
        history.append(score)
        log.debug("epoch %d loss %.4f val %.4f", e, loss, score)
        if score > best:
            best, since = score, 0
            best_state = (model.store.state(), {k: v.copy() for k, v in model.buffers.items()})
        else:
            since += 1
            if since >= cfg.patience:
                break
    if best_state is not None:
        model.store.load_state(best_state[0])
        for k, v in best_state[1].items():
            model.buffers[k][...] = v
    return TrainResult(len(history), best, history)
