"""Adam training loop with inverse-time learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DivergenceError, InputError
from ..io_formats import write_csv
from .network import DelpNet, cross_entropy, cross_entropy_grad, softmax

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["epoch", "step", "train_loss", "val_loss", "val_accuracy"]


@dataclass
class TrainConfig:
    learning_rate: float = 6e-5
    lr_decay: float = 5e-6
    batch_size: int = 128
    epochs: int = 30
    bn_momentum: float = 0.60
    dropout_pool: float = 0.25
    dropout_dense: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.lr_decay < 0:
            raise InputError(f"lr_decay must be >= 0, got {self.lr_decay}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.bn_momentum < 1:
            raise InputError(f"bn_momentum must lie in [0, 1), got {self.bn_momentum}")

    def rate_at(self, step):
        return self.learning_rate / (1.0 + self.lr_decay * step)


class Adam:
    """Adam with bias correction folded into the step size."""

    def __init__(self, model: DelpNet):
        self.m = {name: np.zeros_like(p) for name, p in model.named_parameters()}
        self.v = {name: np.zeros_like(p) for name, p in model.named_parameters()}

    def update(self, model: DelpNet, grads, cfg: TrainConfig, step):
        t = step + 1
        lr = cfg.rate_at(step) * np.sqrt(1.0 - cfg.beta2 ** t) / (1.0 - cfg.beta1 ** t)
        dtype = model.dtype.type
        b1, b2, eps, lr = dtype(cfg.beta1), dtype(cfg.beta2), dtype(cfg.epsilon), dtype(lr)
        for name, p in model.named_parameters():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= lr * m / (np.sqrt(v) + eps)


def train_step(model: DelpNet, batch, labels, cfg: TrainConfig, step):
    """One Adam update on ``batch``; returns the pre-update loss."""
    if model.optimizer is None:
        model.optimizer = Adam(model)
    logits = model.forward(batch, "train")
    loss = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        for layer in model.layers:
            layer.clear()
        model._pending = None
        raise DivergenceError(step, loss)
    grads = model.backward(cross_entropy_grad(logits, labels), batch)
    model.optimizer.update(model, grads, cfg, step)
    return loss


def evaluate(model: DelpNet, x, y, batch_size=256):
    """Mean loss, accuracy and the class-probability matrix in eval mode."""
    probs = []
    for start in range(0, len(x), batch_size):
        probs.append(softmax(model.forward(x[start:start + batch_size], "eval").astype(np.float64)))
    probs = np.concatenate(probs) if probs else np.zeros((0, model.arch.num_classes))
    if len(y) == 0:
        return float("nan"), float("nan"), probs
    p_true = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    loss = float(-np.mean(np.log(p_true)))
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return loss, acc, probs


def fit(model: DelpNet, train, val, cfg: TrainConfig, log_path=None, step=0, callback=None):
    """Train for ``cfg.epochs`` epochs; returns the per-epoch log rows.

    ``train`` and ``val`` are ``(x, y)`` pairs.  Shuffling uses a generator
    seeded from ``cfg.seed`` that is independent of the model's own.
    """
    x, y = train
    if len(x) == 0:
        raise InputError("training set is empty")
    order_rng = np.random.default_rng([cfg.seed, 1])
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = np.sort(perm[start:start + cfg.batch_size])
            losses.append(train_step(model, x[idx], y[idx], cfg, step) * len(idx))
            step += 1
        train_loss = float(np.sum(losses) / len(x))
        val_loss, val_acc = (float("nan"), float("nan"))
        if val is not None and len(val[0]):
            val_loss, val_acc, _ = evaluate(model, val[0], val[1])
        rows.append([epoch, step, train_loss, val_loss, val_acc])
        log.info("epoch %d step %d train_loss %.5f val_loss %.5f val_acc %.4f",
                 epoch, step, train_loss, val_loss, val_acc)
        if callback is not None:
            callback(rows[-1])
    if log_path is not None:
        write_csv(log_path, TRAIN_LOG_HEADER, rows)
    return rows
