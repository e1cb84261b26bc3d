"""Desk-scale training: SGD with momentum, mixup, dropout, expert dropout.

Everything is deterministic given the run seed: data order, mixup draws, and
dropout masks all come from generators derived from one seed sequence, so a
rerun with the same config reproduces metrics and weights bitwise in a
single-threaded process.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .data import Dataset, split_train_val
from .errors import ConfigError, TrainingDiverged
from .layers import expert_dropout  # re-exported training surface
from .tensor import Tensor, inference_mode
from .zoo import Model

__all__ = [
    "TrainConfig",
    "train",
    "evaluate",
    "mixup",
    "expert_dropout",
    "one_hot",
    "learning_rate_at",
    "SGD",
    "MetricsRow",
    "history_to_csv",
    "load_config_file",
]


@dataclass
class TrainConfig:
    """Hyperparameters for one run. The seed is mandatory."""

    seed: int
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    lr_schedule: str = "cosine"  # constant | cosine (cosine has linear warmup)
    warmup_epochs: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dropout_keep: float = 1.0
    mixup_alpha: float = 0.0
    expert_dropout_rate: float = 0.0
    val_fraction: float = 0.2
    autoaugment: bool = False

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("a seed is mandatory")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0.6 <= self.dropout_keep <= 1.0:
            raise ConfigError(
                f"dropout keep probability must be in [0.6, 1.0], got {self.dropout_keep}"
            )
        if not 0.0 <= self.expert_dropout_rate < 1.0:
            raise ConfigError(
                f"expert dropout rate must be in [0, 1), got {self.expert_dropout_rate}"
            )
        if self.mixup_alpha < 0.0:
            raise ConfigError(f"mixup alpha must be >= 0, got {self.mixup_alpha}")
        if self.autoaugment:
            raise NotImplementedError("autoaugment policy is unimplemented")


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def load_config_file(path: str) -> dict:
    """Read a key=value config file with sections; returns a flat dict.

    Section names are ignored (keys must be globally unique); values stay
    strings and are coerced by the consumer.
    """
    parser = configparser.ConfigParser()
    with open(path) as f:
        text = f.read()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    parser.read_string(text)
    flat: dict = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in flat:
                raise ConfigError(f"duplicate config key {key!r}")
            flat[key] = value
    return flat


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup(
    images: np.ndarray,
    labels_onehot: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Blend the batch with a shuffled copy of itself.

    One lambda ~ Beta(alpha, alpha) per batch mixes images and labels alike;
    alpha = 0 disables mixing entirely.
    """
    if alpha <= 0.0:
        return images, labels_onehot
    lam = rng.beta(alpha, alpha)
    perm = rng.permutation(len(images))
    mixed_images = lam * images + (1.0 - lam) * images[perm]
    mixed_labels = lam * labels_onehot + (1.0 - lam) * labels_onehot[perm]
    return mixed_images, mixed_labels


def learning_rate_at(step: int, total_steps: int, config: TrainConfig,
                     steps_per_epoch: int) -> float:
    """Constant, or linear warmup followed by cosine decay to zero."""
    if config.lr_schedule == "constant":
        return config.lr
    warmup_steps = int(round(config.warmup_epochs * steps_per_epoch))
    if warmup_steps > 0 and step < warmup_steps:
        return config.lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Momentum SGD with decoupled-from-nothing classic weight decay:
    ``v = momentum * v + grad + wd * w;  w -= lr * v``."""

    def __init__(self, params: List[Tuple[str, Tensor]], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for _, p in params]

    def step(self, lr: float) -> None:
        for (name, p), v in zip(self.params, self.velocity):
            g = p.grad_array()
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    top1: float


def history_to_csv(history: List[MetricsRow]) -> str:
    lines = ["epoch,split,loss,top1"]
    for row in history:
        lines.append(f"{row.epoch},{row.split},{row.loss:.6f},{row.top1:.6f}")
    return "\n".join(lines) + "\n"


def evaluate(model: Model, ds: Dataset, batch_size: int = 128) -> Tuple[float, float]:
    """(mean loss, top-1 accuracy) in inference mode."""
    total_loss, correct = 0.0, 0
    with inference_mode():
        for start in range(0, len(ds), batch_size):
            images = ds.images[start : start + batch_size]
            labels = ds.labels[start : start + batch_size]
            logits = model.forward(Tensor(images))
            targets = one_hot(labels, model.spec.num_classes, dtype=logits.data.dtype)
            loss = ops.cross_entropy_with_logits(logits, Tensor(targets))
            total_loss += loss.item() * len(images)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    return total_loss / len(ds), correct / len(ds)


def _first_nonfinite_gradient(model: Model) -> str:
    for name, p in model.named_parameters():
        if p.grad is not None and not np.isfinite(p.grad).all():
            return name
    return "<no parameter gradient is non-finite>"


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    callback=None,
) -> Tuple[Model, List[MetricsRow]]:
    """SGD on cross-entropy; returns the trained model and per-epoch metrics.

    The dataset is split train/val with the run seed. A NaN loss aborts with
    the epoch and the first layer whose gradient went non-finite.
    """
    seq = np.random.SeedSequence(config.seed)
    order_rng, augment_rng, dropout_rng = (
        np.random.default_rng(s) for s in seq.spawn(3)
    )
    train_ds, val_ds = split_train_val(dataset, config.val_fraction, config.seed)

    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    optimizer = SGD(params, config.momentum, config.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(train_ds) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    history: List[MetricsRow] = []
    step = 0

    for epoch in range(config.epochs):
        order = order_rng.permutation(len(train_ds))
        epoch_loss, epoch_correct = 0.0, 0
        for start in range(0, len(train_ds), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            images = train_ds.images[batch_idx]
            labels = train_ds.labels[batch_idx]
            targets = one_hot(labels, model.spec.num_classes, dtype=images.dtype)
            images, targets = mixup(images, targets, config.mixup_alpha, augment_rng)

            logits = model.forward(
                Tensor(images),
                training=True,
                rng=dropout_rng,
                dropout_keep=config.dropout_keep,
                expert_dropout_rate=config.expert_dropout_rate,
            )
            loss = ops.cross_entropy_with_logits(
                logits, Tensor(targets, dtype=logits.data.dtype)
            )
            optimizer.zero_grad()
            loss.backward()
            if not np.isfinite(loss.data):
                layer = _first_nonfinite_gradient(model)
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, step {step} "
                    f"(first non-finite gradient: {layer})",
                    epoch=epoch,
                    layer=layer,
                )
            lr = learning_rate_at(step, total_steps, config, steps_per_epoch)
            optimizer.step(lr)
            step += 1
            epoch_loss += loss.item() * len(batch_idx)
            epoch_correct += int((logits.data.argmax(axis=1) == labels).sum())

        history.append(
            MetricsRow(epoch, "train", epoch_loss / len(train_ds), epoch_correct / len(train_ds))
        )
        val_loss, val_top1 = evaluate(model, val_ds, config.batch_size)
        history.append(MetricsRow(epoch, "val", val_loss, val_top1))
        if callback is not None:
            callback(epoch, history)
    return model, history
