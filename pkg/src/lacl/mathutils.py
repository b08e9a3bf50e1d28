"""Numerical primitives: stable softmax, L2 normalization, KL divergence and
central finite differences.

Everything operates on float64 arrays. Functions accept a 1-D vector or a 2-D
array of row vectors where that makes sense.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import (
    DegenerateVectorError,
    DivergenceUndefinedError,
    InvalidInputError,
)

NORM_FLOOR = 1e-12


def as_vector(v, name: str = "v") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    return arr


def softmax(v, axis: int = -1) -> np.ndarray:
    """Normalized exponential with max subtraction."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("softmax input contains non-finite values")
    shifted = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(v, axis: int = -1) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    mx = arr.max(axis=axis, keepdims=True)
    out = mx + np.log(np.exp(arr - mx).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` (or every row of ``v``) to unit Euclidean length.

    Raises DegenerateVectorError when a norm falls below 1e-12.
    """
    arr = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norms < NORM_FLOOR) or not np.all(np.isfinite(norms)):
        raise DegenerateVectorError("cannot normalize a vector with norm below 1e-12")
    return arr / norms


def kl_divergence(p, q) -> float:
    """D_KL(p || q) in nats. Terms with p_i = 0 contribute nothing."""
    p = as_vector(p, "p")
    q = as_vector(q, "q")
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch: {p.size} vs {q.size}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise DivergenceUndefinedError("q vanishes where p has mass")
    ps, qs = p[support], q[support]
    return float(max(np.sum(ps * (np.log(ps) - np.log(qs))), 0.0))


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise InvalidInputError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InvalidInputError(f"function evaluation not finite at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
