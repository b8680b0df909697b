"""Small dense float64 kernel used by the scorer, losses and metrics.

Vectors are 1-D ``numpy.ndarray`` of dtype float64, matrices are 2-D
row-major (C-order) arrays. Every function is pure.
"""

import numpy as np

from .errors import DimensionMismatch, NonPositiveFeature


def as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"expected a non-empty vector, got shape {v.shape}")
    return v


def kron(a, b) -> np.ndarray:
    """Kronecker product of two vectors: ``out[i*len(b) + j] = a[i] * b[j]``."""
    a = as_vec(a)
    b = as_vec(b)
    return np.outer(a, b).ravel()


def softmax(s) -> np.ndarray:
    s = as_vec(s)
    e = np.exp(s - s.max())
    return e / e.sum()


def log_softmax(s) -> np.ndarray:
    s = as_vec(s)
    return s - logsumexp(s)


def logsumexp(s) -> float:
    s = np.asarray(s, dtype=np.float64)
    m = s.max()
    return float(m + np.log(np.exp(s - m).sum()))


def log_elementwise(x) -> np.ndarray:
    """Natural log per element; every element must be strictly positive."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(x > 0):
        bad = np.flatnonzero(~(x > 0).ravel())
        raise NonPositiveFeature(
            f"log of non-positive value {x.ravel()[bad[0]]!r} at position {int(bad[0])}"
        )
    return np.log(x)


def dot(a, b) -> float:
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dot of length {a.size} and {b.size}")
    return float(a @ b)
