"""Gaussian Markov random field structure blocks.

A block packages the fixed structure matrix T of a latent component whose
precision is tau * T, together with its rank deficiency, any sum-to-zero
constraints needed to make an intrinsic block identified, and the log
pseudo-determinant (sum of log positive eigenvalues of T).  Blocks are
assembled into full latent models elsewhere; nothing here depends on data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spmat
from .errors import IndefiniteStructure, IslandError, OutOfRange
from .graphs import Adjacency

# Eigenvalues below this (relative to the spectral radius) count as zero.
_ZERO_EIG_RTOL = 1e-10


@dataclass(frozen=True)
class GmrfBlock:
    """One latent block with precision tau * structure."""

    label: str
    structure: spmat.SparseSym
    rank_deficiency: int
    constraints: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    logdet_star: float = 0.0

    def __post_init__(self):
        cons = np.asarray(self.constraints, dtype=np.float64)
        if cons.size == 0:
            cons = np.zeros((0, self.structure.n))
        if cons.shape[1] != self.structure.n:
            raise OutOfRange("constraint row length must match block size")
        object.__setattr__(self, "constraints", cons)

    @property
    def n(self) -> int:
        return self.structure.n

    @property
    def effective_dim(self) -> int:
        return self.n - self.rank_deficiency

    def quad_form(self, x: np.ndarray) -> float:
        """x' T x for this block's structure."""
        s = self.structure
        prods = s.vals * x[s.rows] * x[s.cols]
        on_diag = s.rows == s.cols
        return float(prods[on_diag].sum() + 2.0 * prods[~on_diag].sum())


def _spectrum(structure: spmat.SparseSym) -> np.ndarray:
    return spmat.eigenvalues_dense(structure).values


def _logdet_star(eigvals: np.ndarray) -> tuple[float, int]:
    scale = max(1.0, float(np.abs(eigvals).max())) if eigvals.size else 1.0
    tol = _ZERO_EIG_RTOL * scale
    if np.any(eigvals < -tol):
        raise IndefiniteStructure(
            f"structure has a negative eigenvalue {eigvals.min():.3e}")
    positive = eigvals[eigvals > tol]
    return float(np.sum(np.log(positive))), int(eigvals.size - positive.size)


def generic0(structure: spmat.SparseSym | np.ndarray,
             label: str = "generic") -> GmrfBlock:
    """Block with a user-supplied positive definite structure matrix."""
    if isinstance(structure, np.ndarray):
        structure = spmat.SparseSym.from_dense(structure)
    eigvals = _spectrum(structure)
    logdet, n_zero = _logdet_star(eigvals)
    if n_zero:
        raise IndefiniteStructure(
            "generic structure must be positive definite; "
            f"found {n_zero} zero eigenvalue(s)")
    return GmrfBlock(label=label, structure=structure, rank_deficiency=0,
                     logdet_star=logdet)


def iid(n: int, label: str = "iid") -> GmrfBlock:
    """Independent unit-structure block (precision tau * I)."""
    return GmrfBlock(label=label, structure=spmat.SparseSym.identity(n),
                     rank_deficiency=0, logdet_star=0.0)


def _besag_structure(adj: Adjacency) -> spmat.SparseSym:
    rows, cols, vals = [], [], []
    for i, nb in enumerate(adj.neighbors):
        rows.append(i)
        cols.append(i)
        vals.append(float(len(nb)))
        for j in nb:
            if i < j:
                rows.append(i)
                cols.append(j)
                vals.append(-1.0)
    return spmat.SparseSym(adj.n, np.array(rows), np.array(cols),
                           np.array(vals))


def besag(adj: Adjacency, label: str = "besag") -> GmrfBlock:
    """Intrinsic autoregression on a contiguity graph.

    T has the neighbor counts on the diagonal and -1 for each edge; its rank
    deficiency equals the number of connected components, and each component
    contributes one sum-to-zero constraint.
    """
    isolated = [adj.ids[i] for i, nb in enumerate(adj.neighbors) if not nb]
    if isolated:
        raise IslandError(
            f"regions without neighbors: {', '.join(isolated)}")
    structure = _besag_structure(adj)
    comps = adj.components()
    eigvals = _spectrum(structure)
    logdet, n_zero = _logdet_star(eigvals)
    if n_zero != len(comps):
        raise IndefiniteStructure(
            f"found {n_zero} zero eigenvalues for {len(comps)} components")
    cons = np.zeros((len(comps), adj.n))
    for k, comp in enumerate(comps):
        cons[k, comp] = 1.0
    return GmrfBlock(label=label, structure=structure,
                     rank_deficiency=len(comps), constraints=cons,
                     logdet_star=logdet)


def proper_besag(adj: Adjacency, d: float,
                 label: str = "proper-besag") -> GmrfBlock:
    """Besag structure made proper by a positive diagonal shift d."""
    if d <= 0.0:
        raise OutOfRange(f"diagonal shift must be positive, got {d}")
    base = besag(adj, label=label)
    structure = base.structure.add_diag(d)
    logdet, n_zero = _logdet_star(_spectrum(structure))
    if n_zero:
        raise IndefiniteStructure("shifted structure is still singular")
    return GmrfBlock(label=label, structure=structure, rank_deficiency=0,
                     logdet_star=logdet)


def leroux(adj: Adjacency, beta: float, label: str = "leroux") -> GmrfBlock:
    """Convex combination (1-beta)*I + beta*Q of independence and Besag.

    beta must lie strictly inside (0, 1); both endpoints degenerate (pure
    independence or the intrinsic model) and are rejected.
    """
    if not 0.0 < beta < 1.0:
        raise OutOfRange(f"beta must lie in (0, 1), got {beta}")
    base = besag(adj, label=label)
    structure = base.structure.scaled(beta).add_diag(1.0 - beta)
    logdet, n_zero = _logdet_star(_spectrum(structure))
    if n_zero:
        raise IndefiniteStructure("leroux structure is singular")
    return GmrfBlock(label=label, structure=structure, rank_deficiency=0,
                     logdet_star=logdet)


def bym(adj: Adjacency, label: str = "bym") -> tuple[GmrfBlock, GmrfBlock]:
    """Structured-plus-unstructured pair (classic parameterization).

    Returns the intrinsic block and an iid block of the same size; each
    carries its own precision hyperparameter when assembled, and the latent
    dimension doubles.
    """
    spatial = besag(adj, label=f"{label}-spatial")
    noise = iid(adj.n, label=f"{label}-iid")
    return spatial, noise


def replicate(block: GmrfBlock, copies: int,
              label: str | None = None) -> GmrfBlock:
    """Block-diagonal replication sharing a single precision.

    Constraints are replicated per copy, so an intrinsic block keeps one
    sum-to-zero constraint per component per copy.
    """
    if copies < 1:
        raise OutOfRange("need at least one copy")
    n = block.n
    s = block.structure
    rows = np.concatenate([s.rows + k * n for k in range(copies)])
    cols = np.concatenate([s.cols + k * n for k in range(copies)])
    vals = np.tile(s.vals, copies)
    structure = spmat.SparseSym(n * copies, rows, cols, vals)
    k_con = block.constraints.shape[0]
    cons = np.zeros((k_con * copies, n * copies))
    for k in range(copies):
        cons[k * k_con:(k + 1) * k_con, k * n:(k + 1) * n] = block.constraints
    return GmrfBlock(label=label or f"{block.label}x{copies}",
                     structure=structure,
                     rank_deficiency=block.rank_deficiency * copies,
                     constraints=cons,
                     logdet_star=block.logdet_star * copies)
