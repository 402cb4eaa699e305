"""Mini-batch SGD on cross-entropy with a cosine-annealed learning rate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..engine import ModelState, NumericError, argmax, parameter_gradients, run
from .data import Dataset

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2."""
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float | None  # measured on the last epoch only


def predict(model: ModelState, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(inputs), batch_size):
        logits = run(model, inputs[i:i + batch_size]).logits
        out.extend(argmax(row) for row in logits)
    return np.asarray(out, dtype=np.int64)


def accuracy(model: ModelState, dataset: Dataset) -> float:
    return float(np.mean(predict(model, dataset.inputs) == dataset.labels))


def train(model: ModelState, dataset: Dataset, epochs: int, lr_max: float, lr_min: float = 0.001,
          batch_size: int = 64, seed: int = 0, momentum: float = 0.0, weight_decay: float = 0.0,
          context: str = "") -> tuple[ModelState, list[EpochStats]]:
    """SGD over `epochs` passes with the rate cosine-annealed per step.

    Shuffling is drawn from ``seed`` so identical calls give identical parameters.
    """
    if dataset.classes != model.spec.classes:
        raise ValueError(f"dataset has {dataset.classes} classes, model has {model.spec.classes}")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    params = [p.copy() for p in model.params]
    velocity = [np.zeros(p.shape) for p in params]
    current = model
    stats = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            lr = cosine_lr(step, total, lr_max, lr_min)
            try:
                loss, grads = parameter_gradients(current, dataset.inputs[idx], labels=dataset.labels[idx],
                                                  dtype=np.float64)
            except NumericError as exc:
                raise DivergenceError(f"{context}epoch {epoch}: {exc}") from None
            if not math.isfinite(loss):
                raise DivergenceError(f"{context}epoch {epoch}: loss is {loss}")
            for p, v, g in zip(params, velocity, grads):
                if weight_decay and p.ndim > 1:
                    g = g + weight_decay * p
                v *= momentum
                v += g
                p -= (lr * v).astype(np.float32)
            current = model.with_params(params)
            losses += loss * len(idx)
            step += 1
        train_acc = accuracy(current, dataset) if epoch == epochs - 1 else None
        stats.append(EpochStats(epoch, lr, losses / n, train_acc))
        log.debug("%sepoch %d lr=%.4f loss=%.4f", context, epoch, lr, losses / n)
    return current, stats
