"""Symmetric sparse matrices with the few factorizations the engine needs.

The heavy lifting is delegated to LAPACK (dense, the common case at the
model sizes this package targets) and SuperLU (sparse, natural ordering)
behind a stable interface: build a :class:`SparseSym`, factor it with
:func:`cholesky`, then call :func:`solve` or read ``factor.logdet``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import (
    DimensionMismatch,
    IndefiniteStructure,
    NonConvergence,
    NotPositiveDefinite,
    OutOfSupport,
)

# Relative pivot tolerance: a pivot at or below PIVOT_RTOL times the largest
# diagonal entry counts as a factorization failure.
PIVOT_RTOL = 1e-12

# Below this order, matrices are densified before factoring.
DENSE_THRESHOLD = 500

# Hard cap for the dense eigenvalue path.
EIGEN_DENSE_CAP = 2000


@dataclass(frozen=True)
class SparseSym:
    """Symmetric matrix stored as upper-triangle COO triplets (row <= col)."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise DimensionMismatch("triplet arrays must have equal length")
        if rows.size and (rows.min() < 0 or cols.max() >= self.n):
            raise DimensionMismatch("triplet index out of bounds")
        if np.any(rows > cols):
            raise DimensionMismatch("entries must satisfy row <= col")
        keys = rows * self.n + cols
        if np.unique(keys).size != keys.size:
            raise DimensionMismatch("duplicate entries in triplet list")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)

    @classmethod
    def from_dense(cls, a: np.ndarray, tol: float = 0.0) -> "SparseSym":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("expected a square matrix")
        if not np.allclose(a, a.T, atol=1e-12 * (1.0 + np.abs(a).max())):
            raise DimensionMismatch("matrix is not symmetric")
        iu = np.triu_indices(a.shape[0])
        mask = np.abs(a[iu]) > tol
        return cls(a.shape[0], iu[0][mask], iu[1][mask], a[iu][mask])

    @classmethod
    def identity(cls, n: int, scale: float = 1.0) -> "SparseSym":
        idx = np.arange(n)
        return cls(n, idx, idx, np.full(n, scale))

    @classmethod
    def from_diag(cls, d: np.ndarray) -> "SparseSym":
        d = np.asarray(d, dtype=np.float64)
        idx = np.arange(d.size)
        return cls(d.size, idx, idx, d)

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.rows, self.cols] = self.vals
        a[self.cols, self.rows] = self.vals
        return a

    def to_csc(self) -> scipy.sparse.csc_matrix:
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        return scipy.sparse.csc_matrix((v, (r, c)), shape=(self.n, self.n))

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n)
        on = self.rows == self.cols
        d[self.rows[on]] = self.vals[on]
        return d

    def add_diag(self, shift: np.ndarray | float) -> "SparseSym":
        """Return self + diag(shift) as a new matrix."""
        shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), (self.n,))
        have = {int(r): k for k, (r, c) in enumerate(zip(self.rows, self.cols))
                if r == c}
        vals = self.vals.copy()
        add_r, add_v = [], []
        for i in range(self.n):
            if shift[i] == 0.0:
                continue
            if i in have:
                vals[have[i]] += shift[i]
            else:
                add_r.append(i)
                add_v.append(shift[i])
        rows = np.concatenate([self.rows, np.array(add_r, dtype=np.int64)])
        cols = np.concatenate([self.cols, np.array(add_r, dtype=np.int64)])
        return SparseSym(self.n, rows, cols, np.concatenate([vals, add_v]))

    def scaled(self, factor: float) -> "SparseSym":
        return SparseSym(self.n, self.rows, self.cols, self.vals * factor)


@dataclass
class CholFactor:
    """Cholesky-type factorization of a symmetric positive definite matrix."""

    n: int
    logdet: float
    _dense: tuple | None = field(default=None, repr=False)
    _splu: object | None = field(default=None, repr=False)

    @property
    def L(self) -> np.ndarray:
        """Lower-triangular factor with L @ L.T equal to the input."""
        if self._dense is not None:
            return np.tril(self._dense[0])
        lu = self._splu
        d = lu.U.diagonal()
        L = (lu.L @ scipy.sparse.diags(np.sqrt(d))).toarray()
        return L

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise DimensionMismatch(
                f"right-hand side has length {b.shape[0]}, expected {self.n}")
        if self._dense is not None:
            return scipy.linalg.cho_solve(self._dense, b, check_finite=False)
        if b.ndim == 1:
            return self._splu.solve(b)
        return np.column_stack([self._splu.solve(b[:, j])
                                for j in range(b.shape[1])])


@dataclass(frozen=True)
class EigenSet:
    """Real eigenvalues in ascending order."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(v) < 0):
            raise DimensionMismatch("eigenvalues must be ascending")
        object.__setattr__(self, "values", v)

    @property
    def min(self) -> float:
        return float(self.values[0])

    @property
    def max(self) -> float:
        return float(self.values[-1])


def factor_dense_spd(a: np.ndarray) -> CholFactor:
    """Factor a dense SPD array directly (fast path used by the engine)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    n = a.shape[0]
    max_diag = float(np.max(np.abs(np.diagonal(a)))) if n else 0.0
    if n <= 8:
        # tiny systems (constraint Schur complements) skip scipy's wrapper
        try:
            c, low = np.linalg.cholesky(a), True
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
    else:
        try:
            c, low = scipy.linalg.cho_factor(a, lower=True,
                                             check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
    pivots = np.diagonal(c) ** 2
    if n and pivots.min() <= PIVOT_RTOL * max_diag:
        raise NotPositiveDefinite(
            f"pivot {pivots.min():.3e} below tolerance "
            f"{PIVOT_RTOL * max_diag:.3e}")
    logdet = 2.0 * float(np.sum(np.log(np.diagonal(c))))
    return CholFactor(n=n, logdet=logdet, _dense=(c, low))


def _factor_sparse_spd(csc: scipy.sparse.csc_matrix) -> CholFactor:
    n = csc.shape[0]
    max_diag = float(np.max(np.abs(csc.diagonal())))
    try:
        lu = scipy.sparse.linalg.splu(
            csc, permc_spec="NATURAL", diag_pivot_thresh=0.0,
            options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if not (np.array_equal(lu.perm_r, np.arange(n))
            and np.array_equal(lu.perm_c, np.arange(n))):
        # SuperLU decided to pivot after all; the dense path is the safe
        # fallback and this size is still tractable.
        return factor_dense_spd(csc.toarray())
    d = lu.U.diagonal()
    if d.min() <= PIVOT_RTOL * max_diag:
        raise NotPositiveDefinite(
            f"pivot {d.min():.3e} below tolerance {PIVOT_RTOL * max_diag:.3e}")
    logdet = float(np.sum(np.log(d)))
    return CholFactor(n=n, logdet=logdet, _splu=lu)


def cholesky(m: SparseSym | np.ndarray,
             dense_threshold: int = DENSE_THRESHOLD) -> CholFactor:
    """Factor a symmetric positive definite matrix.

    Matrices of order below ``dense_threshold`` are densified and handed to
    LAPACK; larger ones go through a natural-order sparse factorization.

    Raises ``NotPositiveDefinite`` when a pivot falls at or below
    ``PIVOT_RTOL`` times the largest diagonal entry.
    """
    if isinstance(m, np.ndarray):
        m = SparseSym.from_dense(m)
    if m.n < dense_threshold:
        return factor_dense_spd(m.to_dense())
    return _factor_sparse_spd(m.to_csc())


def solve(factor: CholFactor, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` given the factorization of ``A``."""
    return factor.solve(b)


def _symmetrize_scale(a: np.ndarray) -> np.ndarray | None:
    """Find positive d with diag(d) @ a symmetric, or None.

    Row-standardized adjacency matrices are similar to symmetric ones via
    such a scaling; a breadth-first walk over the sparsity pattern fixes d
    up to a constant.
    """
    n = a.shape[0]
    d = np.zeros(n)
    for start in range(n):
        if d[start] != 0.0:
            continue
        d[start] = 1.0
        stack = [start]
        while stack:
            i = stack.pop()
            for j in np.nonzero(a[i])[0]:
                if a[j, i] == 0.0:
                    return None
                dj = d[i] * a[i, j] / a[j, i]
                if d[j] == 0.0:
                    d[j] = dj
                    stack.append(j)
                elif not np.isclose(d[j], dj, rtol=1e-8):
                    return None
    scaled = d[:, None] * a
    if not np.allclose(scaled, scaled.T,
                       atol=1e-10 * (1.0 + np.abs(scaled).max())):
        return None
    return d


def eigenvalues_dense(m: SparseSym | np.ndarray) -> EigenSet:
    """Full eigenvalue set of a symmetric or similar-to-symmetric matrix.

    Capped at order 2000; everything is densified.  Matrices similar to a
    symmetric one under a positive diagonal scaling (row-standardized
    weights in particular) are detected and routed through the symmetric
    solver, so the result is exactly real.
    """
    a = m.to_dense() if isinstance(m, SparseSym) else np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch("expected a square matrix")
    n = a.shape[0]
    if n > EIGEN_DENSE_CAP:
        raise DimensionMismatch(
            f"dense eigenvalue path capped at {EIGEN_DENSE_CAP}, got {n}")
    try:
        if np.allclose(a, a.T, atol=1e-12 * (1.0 + np.abs(a).max())):
            vals = np.linalg.eigvalsh(a)
        else:
            d = _symmetrize_scale(a)
            if d is not None:
                rd = np.sqrt(d)
                vals = np.linalg.eigvalsh(rd[:, None] * a / rd[None, :])
            else:
                raw = np.linalg.eigvals(a)
                if np.max(np.abs(raw.imag)) > 1e-8 * (1.0 + np.max(np.abs(raw))):
                    raise IndefiniteStructure(
                        "matrix has a genuinely complex spectrum")
                vals = np.sort(raw.real)
    except np.linalg.LinAlgError as exc:
        raise NonConvergence(str(exc)) from exc
    return EigenSet(np.sort(vals))


def logdet_shifted(eigs: EigenSet, rho: float) -> float:
    """log det(I - rho*W) from the eigenvalues of W.

    Valid only while every shifted eigenvalue 1 - rho*e stays positive.
    """
    shifted = 1.0 - rho * eigs.values
    if np.any(shifted <= 0.0):
        raise OutOfSupport(
            f"1 - rho*e is nonpositive for rho={rho:.6g}")
    return float(np.sum(np.log(shifted)))
