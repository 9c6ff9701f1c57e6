"""Mini-batch training and inference over :class:`~milseg.data.Dataset` objects."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .data import Dataset, LabeledImage, augment, class_index, to_batch
from .model import MilNet
from .optim import AdamState, LrSchedule, step, zero_grads

logger = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 4
    augment: bool = True
    seed: int = 0
    alpha: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 1e-6
    decay_factor: float = 0.9
    decay_interval: int = 20000
    lr_floor: float = 1e-5

    def optimizer(self) -> tuple[AdamState, LrSchedule]:
        return (
            AdamState(self.alpha, self.beta1, self.beta2, self.adam_epsilon, self.weight_decay),
            LrSchedule(self.decay_factor, self.decay_interval, self.lr_floor),
        )


@dataclass
class EpochLog:
    epoch: int
    iteration: int
    lr: float
    train_loss: float
    train_acc: float


def predict(net: MilNet, images: Sequence[LabeledImage], batch_size: int = 16) -> tuple[np.ndarray, float]:
    """Inference-mode probabilities of the good class and the mean cross-entropy."""
    probs, losses = [], []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        logits, _ = net.forward(to_batch(chunk, net.dtype), training=False)
        targets = [class_index(it.label) for it in chunk]
        losses.append(F.softmax_cross_entropy(logits, targets).item() * len(chunk))
        probs.append(F.softmax(logits.data.astype(np.float64))[:, 1])
    if not images:
        return np.zeros(0), float("nan")
    return np.concatenate(probs), float(np.sum(losses) / len(images))


def accuracy(probs: np.ndarray, images: Sequence[LabeledImage]) -> float:
    labels = np.array([class_index(it.label) for it in images])
    return float(np.mean((probs >= 0.5).astype(int) == labels)) if len(images) else float("nan")


def train(
    net: MilNet,
    dataset: Dataset,
    settings: TrainSettings,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> list[EpochLog]:
    """Train in place; returns one log row before training (epoch 0) and one per epoch.

    Loss and accuracy in the log are measured in inference mode on the
    un-augmented training images, so a saved checkpoint reproduces them.
    """
    state, schedule = settings.optimizer()
    params = net.parameters()
    rng = np.random.default_rng(settings.seed)
    base = list(dataset.items)
    samples = [v for it in base for v in augment(it)] if settings.augment else base

    history: list[EpochLog] = []

    def record(epoch: int) -> None:
        probs, loss = predict(net, base)
        row = EpochLog(epoch, state.t, schedule.rate(state.alpha, state.t), loss, accuracy(probs, base))
        history.append(row)
        logger.info("epoch %d iter %d lr %.3g loss %.4f acc %.3f", *vars(row).values())
        if on_epoch is not None:
            on_epoch(row)

    record(0)
    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), settings.batch_size):
            batch = [samples[i] for i in order[start : start + settings.batch_size]]
            logits, _ = net.forward(to_batch(batch, net.dtype), training=True, rng=rng)
            loss = F.softmax_cross_entropy(logits, [class_index(it.label) for it in batch])
            zero_grads(params)
            loss.backward()
            step(state, params, schedule)
        record(epoch)
    return history
