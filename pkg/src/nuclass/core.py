"""Plain-numpy numerical primitives: softmax, layer normalization, and the
distribution statistics (entropy, margin, top-1) used by the gate and the
evaluation code.

All functions operate along the last axis and accept either a single vector
or a batch. Probability-vector arguments are expected to lie on the simplex;
``check_simplex`` is the shared validator.
"""

from __future__ import annotations

import numpy as np

SIMPLEX_ATOL = 1e-9
LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Shape or dimension violates an operation's contract."""


def _as_float_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        raise DimensionError("expected at least a 1-d array")
    return a


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax via max-subtraction."""
    z = _as_float_array(logits)
    if z.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = _as_float_array(logits)
    if z.shape[axis] < 1:
        raise DimensionError("log_softmax over an empty axis")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def layer_norm(x, eps: float = LAYER_NORM_EPS, axis: int = -1) -> np.ndarray:
    """(x - mean) / sqrt(var + eps) with population (biased) variance.

    Affine-free: the feature-modulation step that follows supplies the
    learned scale and shift.
    """
    a = _as_float_array(x)
    if a.shape[axis] < 1:
        raise DimensionError("layer_norm over an empty axis")
    mean = np.mean(a, axis=axis, keepdims=True)
    var = np.mean((a - mean) ** 2, axis=axis, keepdims=True)
    return (a - mean) / np.sqrt(var + eps)


def check_simplex(p, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Validate that ``p`` lies on the probability simplex (last axis)."""
    a = _as_float_array(p)
    if np.any(a < -atol) or np.any(a > 1.0 + atol):
        raise ValueError("probability entries outside [0, 1]")
    sums = np.sum(a, axis=-1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise ValueError(f"probabilities do not sum to 1 (max dev {np.max(np.abs(sums - 1.0)):.3e})")
    return a


def entropy(p) -> np.ndarray | float:
    """Shannon entropy with the 0*log(0) := 0 convention (natural log)."""
    a = _as_float_array(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0.0, a * np.log(a), 0.0)
    out = -np.sum(terms, axis=-1)
    return float(out) if out.ndim == 0 else out


def normalized_entropy(p) -> np.ndarray | float:
    """Entropy divided by log(C); undefined for a single class."""
    a = _as_float_array(p)
    n_classes = a.shape[-1]
    if n_classes < 2:
        raise DimensionError("normalized entropy is undefined for a single class")
    out = entropy(a) / np.log(n_classes)
    return out


def margin(p) -> np.ndarray | float:
    """Largest minus second-largest entry (confidence margin)."""
    a = _as_float_array(p)
    if a.shape[-1] < 2:
        # with one class the top-1 probability is 1 and there is no runner-up
        out = np.zeros(a.shape[:-1])
        return float(out) if out.ndim == 0 else out
    part = np.partition(a, -2, axis=-1)
    out = part[..., -1] - part[..., -2]
    return float(out) if out.ndim == 0 else out


def top1(p) -> tuple[np.ndarray | int, np.ndarray | float]:
    """Return (argmax class, top probability) along the last axis."""
    a = _as_float_array(p)
    idx = np.argmax(a, axis=-1)
    val = np.max(a, axis=-1)
    if val.ndim == 0:
        return int(idx), float(val)
    return idx, val
