"""Confusion matrix and precision/recall aggregation.

Rows of the confusion matrix are true classes, columns are predictions.
A class with no predicted samples has undefined precision, one with no
actual samples has undefined recall; undefined values surface as None in
the per-class table and are excluded from the macro mean with a warning.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, [true, predicted]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total()


def confusion(labels, predictions, num_classes: int,
              class_names: list[str] | None = None) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape or labels.ndim != 1:
        raise ValueError(
            f"labels {labels.shape} and predictions {predictions.shape} must be "
            "equal-length 1-D arrays")
    for what, arr in (("label", labels), ("prediction", predictions)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{what} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    if class_names is None:
        class_names = [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, list(class_names))


def precision_recall(cm: ConfusionMatrix, averaging: str = "macro"):
    """Precision/recall from a confusion matrix.

    averaging='per_class' returns a list of (precision, recall) with None
    for undefined entries; 'macro' and 'micro' return one (precision,
    recall) pair.
    """
    counts = cm.counts
    if counts.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    predicted = counts.sum(axis=0).astype(np.float64)
    actual = counts.sum(axis=1).astype(np.float64)

    if averaging == "micro":
        # single-label: every sample contributes one prediction and one truth
        micro = float(tp.sum() / counts.sum())
        return micro, micro

    per_class: list[tuple[float | None, float | None]] = []
    for c in range(cm.num_classes):
        p = float(tp[c] / predicted[c]) if predicted[c] > 0 else None
        r = float(tp[c] / actual[c]) if actual[c] > 0 else None
        if p is None:
            warnings.warn(f"class '{cm.class_names[c]}' has no predicted samples; "
                          "precision undefined", stacklevel=2)
        if r is None:
            warnings.warn(f"class '{cm.class_names[c]}' has no actual samples; "
                          "recall undefined", stacklevel=2)
        per_class.append((p, r))

    if averaging == "per_class":
        return per_class
    if averaging == "macro":
        ps = [p for p, _ in per_class if p is not None]
        rs = [r for _, r in per_class if r is not None]
        return float(np.mean(ps)), float(np.mean(rs))
    raise ValueError(f"unknown averaging '{averaging}'")


@dataclass
class MetricsBundle:
    accuracy: float
    loss: float
    cm: ConfusionMatrix
    averaging: str = "macro"

    def to_dict(self) -> dict:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            per_class = precision_recall(self.cm, "per_class")
            macro_p, macro_r = precision_recall(self.cm, "macro")
        micro_p, micro_r = precision_recall(self.cm, "micro")
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "averaging": self.averaging,
            "per_class": {
                name: {"precision": p, "recall": r}
                for name, (p, r) in zip(self.cm.class_names, per_class)
            },
            "macro": {"precision": macro_p, "recall": macro_r},
            "micro": {"precision": micro_p, "recall": micro_r},
            "class_names": self.cm.class_names,
            "confusion_matrix": self.cm.counts.tolist(),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)
