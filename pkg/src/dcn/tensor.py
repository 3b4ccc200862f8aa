"""Dense linear-algebra primitives and seeded randomness.

Vectors and matrices are plain ``numpy.float64`` arrays. Matrices are stored
row-major (C order) everywhere, including inside checkpoints, so a matrix
``M`` with shape ``(rows, cols)`` has ``M[i, j]`` at flat offset
``i * cols + j``.

Randomness comes from numpy's ``PCG64`` bit generator, which produces the same
stream for a given seed on every platform numpy supports.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=DTYPE)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.asarray(values, dtype=DTYPE)
    if m.ndim == 1 and m.size == 0 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def check_finite(values, what: str = "values") -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contain NaN or Inf")


def matvec(M, v) -> np.ndarray:
    """Return ``M @ v``; ``M`` is ``rows x cols`` and ``v`` has length ``cols``."""
    M = np.asarray(M, dtype=DTYPE)
    v = as_vector(v)
    if M.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {M.shape}")
    if M.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: matrix has {M.shape[1]} columns, vector has length {v.shape[0]}")
    return M @ v


def dot(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: lengths {a.shape[0]} and {b.shape[0]} differ")
    return float(a @ b)


def axpy_scale(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` as a new array."""
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise ShapeError(f"axpy: lengths {x.shape[0]} and {y.shape[0]} differ")
    return alpha * x + y


def global_norm(arrays: Iterable) -> float:
    """L2 norm of all entries of all arrays taken together."""
    total = 0.0
    for a in arrays:
        a = np.asarray(a, dtype=DTYPE)
        total += float(np.sum(a * a))
    return float(np.sqrt(total))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent child stream for ``(seed, *path)``, e.g. one per grid point."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


def uniform(rng: np.random.Generator, limit: float, shape) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)
