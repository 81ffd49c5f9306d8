"""Adam optimization and the early-stopped training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..dataset import AugmentParams, augment_sample
from . import layers as L
from .network import ModelSpec, Params, forward, gradients, images_to_input, init_params

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [1, max_epochs]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Params, grads: Params, state: AdamState, cfg: TrainConfig) -> tuple[Params, AdamState]:
    """One Adam update, applied in place; returns ``(params, state)`` for chaining."""
    b1, b2, lr, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


class EarlyStopping:
    """Tracks the best validation loss; a strict decrease counts as improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record ``val_loss``; return True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.wait == 0


def evaluate(params: Params, spec: ModelSpec, images, labels, batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode ``(mean cross-entropy, accuracy at 0.5)``."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.concatenate(
        [forward(params, spec, images_to_input(images[s : s + batch_size])) for s in range(0, len(images), batch_size)]
    )
    acc = float(np.mean((probs[:, 1] >= 0.5) == (labels == 1)))
    return L.cross_entropy(probs, labels), acc


def train(
    spec: ModelSpec,
    train_images: np.ndarray,
    train_labels,
    val_images: np.ndarray,
    val_labels,
    cfg: TrainConfig = TrainConfig(),
    augment: Optional[AugmentParams] = AugmentParams(),
    params: Optional[Params] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> tuple[Params, list[dict]]:
    """Train with Adam and early stopping on validation loss.

    Args:
        train_images, val_images: uint8 arrays of shape (N, S, S, 3).
        augment: augmentation for training inputs, or None to disable.
        params: starting weights; seeded initialization when omitted.
        on_epoch: called with each history row as it is produced.

    Returns:
        The parameters of the best-validation-loss epoch and the per-epoch
        history rows (keys ``HISTORY_FIELDS``).
    """
    train_images = np.asarray(train_images)
    val_images = np.asarray(val_images)
    y_train = np.asarray(train_labels, dtype=np.int64)
    y_val = np.asarray(val_labels, dtype=np.int64)
    if len(train_images) == 0 or len(val_images) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if len(train_images) != len(y_train) or len(val_images) != len(y_val):
        raise ValueError("image and label counts differ")

    params = init_params(spec, cfg.seed) if params is None else {k: v.copy() for k, v in params.items()}
    state = AdamState.zeros_like(params)
    stopper = EarlyStopping(cfg.patience)
    best = {k: v.copy() for k, v in params.items()}
    n = len(train_images)
    history: list[dict] = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if augment is not None:
                batch = np.stack([augment_sample(train_images[i], augment, epoch * n + int(i)) for i in idx])
            else:
                batch = train_images[idx]
            loss, probs, grads = gradients(params, spec, images_to_input(batch), y_train[idx], (cfg.seed, epoch, b))
            adam_step(params, grads, state, cfg)
            loss_sum += loss * len(idx)
            correct += int(np.sum((probs[:, 1] >= 0.5) == (y_train[idx] == 1)))

        val_loss, val_acc = evaluate(params, spec, val_images, y_val)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "train_acc": correct / n,
            "val_loss": val_loss,
            "val_acc": val_acc,
        }
        history.append(row)
        log.info("epoch %d train_loss %.4f train_acc %.3f val_loss %.4f val_acc %.3f",
                 epoch, row["train_loss"], row["train_acc"], val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(row)
        stop = stopper.update(epoch, val_loss)
        if stopper.improved_last:
            best = {k: v.copy() for k, v in params.items()}
        if stop:
            log.info("early stopping after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    return best, history
