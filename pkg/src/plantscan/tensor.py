"""Dense tensor operations and their gradient companions.

Arrays are plain numpy ndarrays in row-major layout; images are stored
height x width x channels. Parameters and activations are float32 by
default, but every operation is dtype-preserving so that float64 inputs
flow through unchanged (the finite-difference test oracles rely on this).
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Coerce nested lists / arrays to a contiguous array of the given dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a 2-D ``a`` (m x k) and 2-D ``b`` (k x n).

    The reduction order is fixed by the backing BLAS, so two evaluations of
    identical inputs produce bit-identical results.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of relu given its input; the subgradient at exactly 0 is 0."""
    return upstream * (x > 0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax along ``axis``.

    The row maximum is subtracted before exponentiating, so arbitrarily
    large finite logits do not overflow. Every output lies in (0, 1) and
    each row sums to 1.
    """
    logits = np.asarray(logits)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_grad(probs: np.ndarray, upstream: np.ndarray, axis: int = -1) -> np.ndarray:
    """Backward for softmax given its output ``probs``: p * (g - <g, p>)."""
    inner = np.sum(upstream * probs, axis=axis, keepdims=True)
    return probs * (upstream - inner)


class GradientTape(dict):
    """Mapping from parameter name to its accumulated gradient array.

    Gradients add across calls to :meth:`accumulate`; a gradient's shape
    must always equal its parameter's shape.
    """

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        grad = np.asarray(grad)
        if name in self:
            if self[name].shape != grad.shape:
                raise ValueError(
                    f"gradient shape mismatch for {name!r}: "
                    f"{self[name].shape} vs {grad.shape}"
                )
            self[name] = self[name] + grad
        else:
            self[name] = grad.copy()
