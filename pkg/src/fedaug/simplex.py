"""Euclidean projections onto the probability simplex and its lower-bounded
generalization {lambda: sum(lambda) = 1, lambda_i >= lambda_min}.

A negative ``lambda_min`` permits client weights outside the convex hull
(extrapolation); ``lambda_min`` must stay strictly below 1/n or the feasible
set collapses to the uniform point.
"""

from __future__ import annotations

import numpy as np

from .linalg import as_vector, ensure_finite


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort-and-threshold method: with entries sorted descending, find the
    largest k such that v_(k) - (sum of top k - 1)/k > 0, take tau as that
    average, and return max(v - tau, 0).
    """
    v = as_vector(v)
    ensure_finite(v, "project_simplex input")
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u)
    ks = np.arange(1, v.size + 1)
    support = u - (cumulative - 1.0) / ks > 0.0
    k = int(ks[support][-1])  # k=1 always qualifies: u_1 - (u_1 - 1) = 1 > 0
    tau = (cumulative[k - 1] - 1.0) / k
    return np.maximum(v - tau, 0.0)


def project_generalized(v, lambda_min: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto {lambda: sum = 1, lambda >= lambda_min}.

    Reduces affinely to the plain simplex projection: with
    c = 1 - n*lambda_min, the projection is
    c * project_simplex((v - lambda_min) / c) + lambda_min.
    """
    v = as_vector(v)
    n = v.size
    if lambda_min >= 1.0 / n:
        raise ValueError(f"lambda_min must be < 1/n (got lambda_min={lambda_min}, n={n})")
    scale = 1.0 - n * lambda_min
    inner = project_simplex((v - lambda_min) / scale)
    return scale * inner + lambda_min
