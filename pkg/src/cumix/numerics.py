"""Dense float64 primitives with closed-form gradients.

Only the layer types the model needs: affine maps, ReLU, and softmax
cross-entropy against soft targets. Everything here is a pure function.
"""

from __future__ import annotations

import numpy as np

TARGET_TOL = 1e-6


class DimensionError(ValueError):
    pass


def _as2d(name: str, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def affine_forward(inputs, weight, bias) -> np.ndarray:
    x = _as2d("input", inputs)
    w = _as2d("weight", weight)
    b = np.asarray(bias, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"input {x.shape} does not conform to weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias {b.shape} does not conform to weight {w.shape}")
    return x @ w + b


def affine_backward(inputs, weight, upstream):
    """Return ``(grad_input, grad_weight, grad_bias)`` for ``inputs @ weight + bias``."""
    x = _as2d("input", inputs)
    w = _as2d("weight", weight)
    up = _as2d("upstream", upstream)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"input {x.shape} does not conform to weight {w.shape}")
    if up.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"upstream {up.shape} does not match forward output {(x.shape[0], w.shape[1])}"
        )
    return up @ w.T, x.T @ up, up.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if x.shape != up.shape:
        raise DimensionError(f"relu input {x.shape} vs upstream {up.shape}")
    return np.where(x > 0.0, up, 0.0)


def log_softmax_rows(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def check_soft_targets(target, tol: float = TARGET_TOL) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if np.any(t < 0.0) or not np.all(np.isfinite(t)):
        raise ValueError("soft target has negative or non-finite entries")
    sums = t.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"soft target rows must sum to 1 (got {np.atleast_1d(sums)})")
    return t


def soft_cross_entropy(logits, target) -> tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector against a distribution.

    Returns the loss and its gradient ``softmax(logits) - target``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"logits must be a vector, got shape {z.shape}")
    t = check_soft_targets(target)
    if t.shape != z.shape:
        raise DimensionError(f"logits {z.shape} vs target {t.shape}")
    logp = log_softmax_rows(z)
    return float(-(t * logp).sum()), np.exp(logp) - t


def soft_cross_entropy_mean(logits, targets) -> tuple[float, np.ndarray]:
    """Batch mean of row-wise soft cross-entropy, with gradient w.r.t. the logits."""
    z = _as2d("logits", logits)
    t = check_soft_targets(targets)
    if t.shape != z.shape:
        raise DimensionError(f"logits {z.shape} vs targets {t.shape}")
    n = z.shape[0]
    logp = log_softmax_rows(z)
    per_row = -(t * logp).sum(axis=1)
    # fixed left-to-right reduction keeps results bitwise reproducible
    loss = 0.0
    for v in per_row:
        loss += v
    return loss / n, (np.exp(logp) - t) / n


def one_hot(indices, num_classes: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((idx.shape[0], num_classes))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out
