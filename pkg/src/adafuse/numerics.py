"""Dense kernels and activations with analytic derivatives.

Values are stored in ``storage_dtype()`` (float32 by default) while every
reduction accumulates in float64. ``float64_mode()`` switches storage to
float64, which is what the finite-difference gradient checks run under.
"""

from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np
from scipy.special import erf

from .exceptions import DegenerateVectorError, NonFiniteError, ShapeError

NORM_EPS = 1e-12

_STORAGE = contextvars.ContextVar("adafuse_storage_dtype", default=np.float32)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def storage_dtype():
    return _STORAGE.get()


@contextlib.contextmanager
def float64_mode():
    """Store parameters and activations in float64 inside the block."""
    token = _STORAGE.set(np.float64)
    try:
        yield
    finally:
        _STORAGE.reset(token)


def as_storage(x) -> np.ndarray:
    return np.asarray(x, dtype=storage_dtype())


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return x


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return check_finite(out.astype(storage_dtype()), "matmul result")


def gelu(x) -> np.ndarray:
    """Exact erf-based GELU, ``x * Phi(x)``."""
    x64 = np.asarray(x, dtype=np.float64)
    out = 0.5 * x64 * (1.0 + erf(x64 * _INV_SQRT2))
    return out.astype(storage_dtype())


def gelu_grad(x) -> np.ndarray:
    """d gelu / dx = Phi(x) + x * phi(x)."""
    x64 = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x64 * x64)
    return (cdf + x64 * pdf).astype(storage_dtype())


def sigmoid(x):
    """Branch-stable logistic function; works on scalars and arrays."""
    x64 = np.asarray(x, dtype=np.float64)
    pos = x64 >= 0
    # exp of a non-positive argument only, so nothing overflows
    e = np.exp(np.where(pos, -x64, x64))
    out = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the result strictly inside (0, 1) after rounding to the output dtype
    dt = np.float64 if out.ndim == 0 else storage_dtype()
    one = dt(1.0)
    out = np.clip(out.astype(dt), np.finfo(dt).tiny, np.nextafter(one, dt(0.0)))
    if out.ndim == 0:
        return float(out)
    return out


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(storage_dtype())


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale ``v`` (or each row of it) to unit Euclidean norm."""
    v64 = np.asarray(v, dtype=np.float64)
    if v64.size == 0:
        raise ShapeError("cannot normalise an empty vector")
    norm = np.sqrt(np.sum(v64 * v64, axis=axis, keepdims=True))
    if np.any(norm < NORM_EPS):
        raise DegenerateVectorError(f"vector norm below {NORM_EPS:g}")
    return (v64 / norm).astype(storage_dtype())


def cosine_similarity(a, b) -> float:
    a64 = np.asarray(a, dtype=np.float64).ravel()
    b64 = np.asarray(b, dtype=np.float64).ravel()
    if a64.shape != b64.shape:
        raise ShapeError(f"cosine of mismatched dims {a64.shape} and {b64.shape}")
    na = math.sqrt(float(a64 @ a64))
    nb = math.sqrt(float(b64 @ b64))
    if na < NORM_EPS or nb < NORM_EPS:
        raise DegenerateVectorError("cosine similarity with a zero vector")
    return min(1.0, max(-1.0, float(a64 @ b64) / (na * nb)))


def rowwise_cosine(a, b) -> np.ndarray:
    """Cosine between matching rows of two (n, d) arrays, as float64."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.shape != b64.shape:
        raise ShapeError(f"cosine of mismatched shapes {a64.shape} and {b64.shape}")
    na = np.linalg.norm(a64, axis=1)
    nb = np.linalg.norm(b64, axis=1)
    if np.any(na < NORM_EPS) or np.any(nb < NORM_EPS):
        raise DegenerateVectorError("cosine similarity with a zero vector")
    return np.clip(np.einsum("ij,ij->i", a64, b64) / (na * nb), -1.0, 1.0)
