"""Dense float64 vector/matrix helpers shared by all modules.

Thin wrappers over numpy that add the simulator's safety contract: every
public operation validates shapes and rejects non-finite results instead of
silently propagating NaN/Inf through a federation run.
"""

from __future__ import annotations

import numpy as np


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a nonempty 1-d vector, got shape {v.shape}")
    return v


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"expected a nonempty 2-d matrix, got shape {m.shape}")
    return m


def ensure_finite(arr, context: str) -> np.ndarray:
    """Raise if ``arr`` contains NaN or Inf; returns ``arr`` unchanged."""
    arr = np.asarray(arr)
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {context}")
    return arr


def axpy(alpha: float, x, y) -> np.ndarray:
    """alpha * x + y, element-wise."""
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    return ensure_finite(alpha * x + y, "axpy result")


def squared_norm(x) -> float:
    """Sum of squared entries."""
    x = np.asarray(x, dtype=np.float64)
    return float(ensure_finite(np.dot(x.ravel(), x.ravel()), "squared_norm result"))


def matvec(a, x) -> np.ndarray:
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: matrix is {a.shape}, vector has length {x.shape[0]}")
    return ensure_finite(a @ x, "matvec result")
