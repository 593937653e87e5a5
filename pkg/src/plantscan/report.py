"""Figure rendering for training runs and evaluations.

Renders to files with the Agg backend, so it works headless; figures land
alongside the JSONL/JSON outputs of the command line.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import ConfusionMatrix


def plot_history(history, path) -> Path:
    """Accuracy and loss curves, train vs validation, one panel each."""
    epochs = [rec.epoch for rec in history]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    ax_acc.plot(epochs, [r.train_acc for r in history], marker="o", label="train")
    ax_acc.plot(epochs, [r.val_acc for r in history], marker="s", label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.legend()
    ax_acc.grid(True, alpha=0.3)

    ax_loss.plot(epochs, [r.train_loss for r in history], marker="o", label="train")
    ax_loss.plot(epochs, [r.val_loss for r in history], marker="s", label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.grid(True, alpha=0.3)

    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_confusion(cm: ConfusionMatrix, path) -> Path:
    """Annotated heatmap; rows are true classes, columns predictions."""
    counts = cm.counts
    n = cm.num_classes
    fig, ax = plt.subplots(figsize=(1.2 * n + 2.5, 1.0 * n + 2.0))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(n), cm.class_names, rotation=30, ha="right")
    ax.set_yticks(range(n), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = counts.max() / 2 if counts.max() else 0
    for i in range(n):
        for j in range(n):
            color = "white" if counts[i, j] > threshold else "black"
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center", color=color)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
