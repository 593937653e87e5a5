"""Loss, Adam, and the deterministic training loop.

The loop owns two spawned RNG streams (epoch shuffling, augmentation), so
(seed, data, config) fully determines every batch and therefore the final
parameter bytes. Validation loss drives early stopping: training halts
after `patience` consecutive epochs without strict improvement and the
best epoch's weights are restored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geodata import augment_array
from .metrics import MetricsBundle, confusion
from .models import Model
from .seeding import spawn_rngs

PROB_FLOOR = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 2
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    train_loss: float
    val_acc: float
    val_loss: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch,
                "train_acc": self.train_acc, "train_loss": self.train_loss,
                "val_acc": self.val_acc, "val_loss": self.val_loss}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def write_history(history: list[EpochRecord], path) -> None:
    """One EpochRecord per line, JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")


def sparse_ce_loss(probs: np.ndarray, labels) -> float:
    """Mean negative log probability of the true class, clamped at 1e-7."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.ndim != 1 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"probs {probs.shape} vs labels {labels.shape}")
    n, c = probs.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    picked = probs[np.arange(n), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def softmax_ce_grad(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of sparse CE w.r.t. the logits under a softmax: (p - onehot)/N."""
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return (grad / n).astype(probs.dtype)


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params: list[tuple[str, np.ndarray]]):
        self.m = {name: np.zeros_like(p) for name, p in params}
        self.v = {name: np.zeros_like(p) for name, p in params}
        self.t = 0


def adam_step(params, grads, state: AdamState, config: TrainConfig) -> None:
    """One in-place Adam update over aligned (name, array) lists."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    gdict = dict(grads)
    for name, p in params:
        g = gdict[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        p -= (config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)).astype(p.dtype)


class EarlyStopping:
    """Stop after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _forward_batched(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = [model.forward(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: p.copy() for name, p in model.params()}


def _restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.params():
        np.copyto(p, snap[name])


def train(model: Model, dataset, config: TrainConfig) -> tuple[Model, list[EpochRecord]]:
    """Fit the model on the dataset's train split, validating each epoch.

    `dataset` must expose arrays(split, mask_channel) -> (x, labels); the
    last partial minibatch is used, not dropped.
    """
    mask = model.spec.mask_channel
    x_train, y_train = dataset.arrays("train", mask_channel=mask)
    x_val, y_val = dataset.arrays("val", mask_channel=mask)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ValueError("train and validation splits must be non-empty")

    shuffle_rng, aug_rng = spawn_rngs(config.seed, 2)
    state = AdamState(model.params())
    stopper = EarlyStopping(config.patience)
    history: list[EpochRecord] = []
    best = _snapshot(model)
    n = x_train.shape[0]

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        hit_sum = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            if config.augment:
                xb = np.stack([augment_array(img, aug_rng) for img in xb])
            probs = model.forward(xb, train=True)
            loss_sum += sparse_ce_loss(probs, yb) * len(idx)
            hit_sum += int(np.sum(np.argmax(probs, axis=1) == yb))
            model.zero_grads()
            model.backward(softmax_ce_grad(probs, yb))
            adam_step(model.params(), model.grads(), state, config)

        val_probs = _forward_batched(model, x_val)
        rec = EpochRecord(
            epoch=epoch,
            train_acc=hit_sum / n,
            train_loss=loss_sum / n,
            val_acc=float(np.mean(np.argmax(val_probs, axis=1) == y_val)),
            val_loss=sparse_ce_loss(val_probs, y_val),
        )
        history.append(rec)
        improved_to_best = rec.val_loss < stopper.best_loss
        stop = stopper.update(epoch, rec.val_loss)
        if improved_to_best:
            best = _snapshot(model)
        if stop:
            break

    _restore(model, best)
    return model, history


def evaluate(model: Model, x: np.ndarray, labels, batch_size: int = 64) -> MetricsBundle:
    """Accuracy, mean loss, confusion matrix, and precision/recall for a split."""
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate an empty split")
    probs = _forward_batched(model, x, batch_size)
    preds = np.argmax(probs, axis=1)
    cm = confusion(labels, preds, model.spec.num_classes, model.spec.class_names)
    return MetricsBundle(
        accuracy=float(np.mean(preds == labels)),
        loss=sparse_ce_loss(probs, labels),
        cm=cm,
    )


def evaluate_split(model: Model, dataset, split: str = "test") -> MetricsBundle:
    x, y = dataset.arrays(split, mask_channel=model.spec.mask_channel)
    return evaluate(model, x, y)
