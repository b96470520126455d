"""Dense-matrix primitives and the divergence metrics built on them.

Matrices are plain ``numpy.ndarray`` objects in float64. The ``as_matrix`` and
``as_row_stochastic`` validators enforce the invariants the rest of the
package relies on (2-D, finite, and for the stochastic variant non-negative
rows summing to one).
"""

from __future__ import annotations

import numpy as np

#: Probabilities below this value are clamped before taking logs.
EPS_FLOOR = 1e-12

#: Tolerance used when checking that a row is a probability distribution.
NORMALIZATION_TOL = 1e-9


class NonFiniteError(ValueError):
    """Raised when a matrix contains NaN or infinite entries."""


def _first_bad_index(a: np.ndarray) -> tuple[int, ...]:
    bad = np.argwhere(~np.isfinite(a))
    return tuple(int(i) for i in bad[0])


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate ``x`` as a finite 2-D float64 matrix with at least one cell."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name}: matrix must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name}: non-finite entry at index {_first_bad_index(a)}")
    return a


def as_row_stochastic(x, name: str = "matrix", tol: float = NORMALIZATION_TOL) -> np.ndarray:
    a = as_matrix(x, name)
    if np.any(a < -tol) or np.any(a > 1 + tol):
        raise ValueError(f"{name}: entries must lie in [0, 1]")
    sums = a.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{name}: row {i} sums to {sums[i]!r}, not 1")
    return a


def row_softmax(s, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``scale * s`` with max subtraction."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale!r}")
    a = as_matrix(s, "scores") * scale
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def floor_and_renormalize(p: np.ndarray, floor: float = EPS_FLOOR) -> np.ndarray:
    """Clamp entries to ``floor`` and rescale every row (last axis) to sum to one."""
    q = np.maximum(p, floor)
    return q / q.sum(axis=-1, keepdims=True)


def _as_distribution(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name}: expected a non-empty 1-D probability row")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name}: non-finite entry at index {_first_bad_index(v)}")
    if np.any(v < -NORMALIZATION_TOL):
        raise ValueError(f"{name}: negative probability")
    total = float(v.sum())
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"{name}: row sums to {total!r}, not 1")
    return v


def kl_div(p, q) -> float:
    """Kullback-Leibler divergence ``KL(p || q)`` in nats, with an epsilon floor."""
    p = _as_distribution(p, "p")
    q = _as_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    p = floor_and_renormalize(p)
    q = floor_and_renormalize(q)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def m_kl(a, b) -> float:
    """Symmetric, row-summed KL divergence between two row-stochastic matrices.

    ``sum_i KL(a_i || b_i) + KL(b_i || a_i)``. The two directions are merged
    into ``sum (p - q) * (log p - log q)``, which makes the result exactly
    symmetric in floating point.
    """
    a = as_row_stochastic(a, "A")
    b = as_row_stochastic(b, "B")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    p = floor_and_renormalize(a)
    q = floor_and_renormalize(b)
    return float(np.sum((p - q) * (np.log(p) - np.log(q))))


def m_kl_rows(a, b) -> np.ndarray:
    """Per-row contributions of :func:`m_kl`."""
    a = as_row_stochastic(a, "A")
    b = as_row_stochastic(b, "B")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    p = floor_and_renormalize(a)
    q = floor_and_renormalize(b)
    return np.sum((p - q) * (np.log(p) - np.log(q)), axis=1)


def row_argmax(s) -> np.ndarray:
    """Column index of each row's maximum; ties go to the lowest index."""
    return np.argmax(as_matrix(s, "scores"), axis=1)


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise ValueError("pearson expects two 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt(np.dot(dx, dx)))
    sy = float(np.sqrt(np.dot(dy, dy)))
    if sx == 0.0 and sy == 0.0:
        raise ValueError("pearson undefined: both x and y are constant")
    if sx == 0.0:
        raise ValueError("pearson undefined: x is constant")
    if sy == 0.0:
        raise ValueError("pearson undefined: y is constant")
    r = float(np.dot(dx, dy)) / (sx * sy)
    return max(-1.0, min(1.0, r))
