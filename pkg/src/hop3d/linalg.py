"""Dense vector primitives, modified Gram-Schmidt and complement projection.

Vectors are 1-D float64 numpy arrays. An orthonormal basis is stored as a
``d x r`` matrix whose columns are the basis vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_REL_TOL = 1e-10


@dataclass(frozen=True)
class OrthoBasis:
    """Orthonormal columns ``b`` (shape ``d x r``) with ``r`` the effective rank."""

    b: np.ndarray

    def __post_init__(self):
        if self.b.ndim != 2:
            raise ValueError(f"basis matrix must be 2-D, got shape {self.b.shape}")

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def r(self) -> int:
        return self.b.shape[1]

    @classmethod
    def empty(cls, d: int) -> "OrthoBasis":
        return cls(np.zeros((d, 0)))

    def gram_deviation(self) -> float:
        """Max absolute entry of ``B^T B - I``."""
        if self.r == 0:
            return 0.0
        return float(np.max(np.abs(self.b.T @ self.b - np.eye(self.r))))


def as_vec(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    return v


def dot(a, b) -> float:
    a, b = as_vec(a), as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b)


def l2_normalize(a) -> np.ndarray:
    a = as_vec(a)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return a / n


def modified_gram_schmidt(vectors: Iterable, rel_tol: float = DEFAULT_REL_TOL) -> OrthoBasis:
    """Orthonormalize ``vectors`` in order, dropping near-dependent ones.

    A vector is dropped when its residual norm after removing the components
    along all previously accepted columns is below ``rel_tol`` times its
    original norm. Zero vectors are always dropped. The residual is updated
    one column at a time (modified, not classical, Gram-Schmidt).

    Parameters
    ----------
    vectors : iterable of array_like
        Input vectors, all of the same length ``d``.
    rel_tol : float
        Relative rank-truncation tolerance.

    Returns
    -------
    OrthoBasis
        ``d x r`` basis; ``r = 0`` for an empty input.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    vecs = [as_vec(v) for v in vectors]
    if not vecs:
        return OrthoBasis(np.zeros((0, 0)))
    d = vecs[0].shape[0]
    if d < 1:
        raise ValueError("vectors must have dimension >= 1")
    for v in vecs:
        if v.shape[0] != d:
            raise ValueError(f"dimension mismatch: {v.shape[0]} vs {d}")

    cols: list[np.ndarray] = []
    for v in vecs:
        norm0 = np.linalg.norm(v)
        if norm0 == 0.0:
            continue
        w = v.copy()
        for q in cols:
            w -= (q @ w) * q
        # second sweep keeps B^T B = I to machine precision for ill-conditioned inputs
        for q in cols:
            w -= (q @ w) * q
        nw = np.linalg.norm(w)
        if nw < rel_tol * norm0:
            continue
        cols.append(w / nw)
        if len(cols) == d:
            break
    if not cols:
        return OrthoBasis.empty(d)
    return OrthoBasis(np.column_stack(cols))


def project_out(g, basis: OrthoBasis) -> np.ndarray:
    """Remove from ``g`` its component inside ``span(basis)``: ``g - B (B^T g)``."""
    g = as_vec(g)
    if basis.r == 0:
        if basis.d not in (0, g.shape[0]):
            raise ValueError(f"dimension mismatch: {g.shape[0]} vs basis {basis.d}")
        return g.copy()
    if g.shape[0] != basis.d:
        raise ValueError(f"dimension mismatch: {g.shape[0]} vs basis {basis.d}")
    B = basis.b
    return g - B @ (B.T @ g)


def stack_rows(vectors: Sequence) -> np.ndarray:
    return np.vstack([as_vec(v) for v in vectors])
