"""Latent Gaussian model assembly and observation likelihoods.

A model couples observations to a latent field x through a sparse map
eta = A x.  The field is a concatenation of structure blocks, each with a
precision that is either a free hyperparameter or a fixed constant.  Two
observation families are supported: Gaussian with a precision
hyperparameter, and Poisson with a known offset on the log scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.special

from .errors import (
    DataError,
    DimensionMismatch,
    NotPositiveDefinite,
    UnsupportedFamily,
)
from .gmrf import GmrfBlock
from .priors import HyperPrior

_LOG_2PI = math.log(2.0 * math.pi)

# Weak default precision for unpenalized fixed effects.
FIXED_EFFECT_PRECISION = 1e-3

# Diagonal jitter, relative to the block precision, applied to intrinsic
# blocks inside factorizations only.
INTRINSIC_JITTER = 1e-8


@dataclass(frozen=True)
class BlockRef:
    """A structure block bound to a precision: free (prior) or fixed."""

    block: GmrfBlock
    prior: HyperPrior | None = None
    fixed_precision: float | None = None

    def __post_init__(self):
        if (self.prior is None) == (self.fixed_precision is None):
            raise DimensionMismatch(
                "block needs exactly one of a prior or a fixed precision")
        if self.fixed_precision is not None and self.fixed_precision <= 0:
            raise NotPositiveDefinite("fixed block precision must be positive")


@dataclass
class LatentModel:
    """Observations, latent blocks, and the map between them."""

    y: np.ndarray
    family: str
    a_matrix: scipy.sparse.csr_matrix
    blocks: list[BlockRef]
    offset_log_e: np.ndarray | None = None
    obs_prior: HyperPrior | None = None
    obs_fixed_precision: float | None = None
    latent_names: list[str] = field(default_factory=list)

    # filled by build_model
    observed: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    block_slices: list[slice] = field(default_factory=list)
    hypers: list[HyperPrior] = field(default_factory=list)
    _hyper_of_block: list[int | None] = field(default_factory=list)
    _obs_hyper: int | None = None

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_latent(self) -> int:
        return self.a_matrix.shape[1]

    @property
    def n_hypers(self) -> int:
        return len(self.hypers)

    @property
    def constraint_matrix(self) -> np.ndarray:
        """Stacked block constraints in full latent coordinates (k x m)."""
        rows = []
        for ref, sl in zip(self.blocks, self.block_slices):
            cons = ref.block.constraints
            for r in range(cons.shape[0]):
                full = np.zeros(self.n_latent)
                full[sl] = cons[r]
                rows.append(full)
        if not rows:
            return np.zeros((0, self.n_latent))
        return np.vstack(rows)

    # -- precision bookkeeping ----------------------------------------------

    def block_precision(self, ref_index: int, hyper_values: np.ndarray) -> float:
        h = self._hyper_of_block[ref_index]
        if h is None:
            return float(self.blocks[ref_index].fixed_precision)
        return float(hyper_values[h])

    def obs_precision(self, hyper_values: np.ndarray) -> float:
        if self.family != "gaussian":
            raise UnsupportedFamily("observation precision is Gaussian-only")
        if self._obs_hyper is None:
            return float(self.obs_fixed_precision)
        return float(hyper_values[self._obs_hyper])

    def check_precisions(self, hyper_values: np.ndarray) -> None:
        for k in range(len(self.blocks)):
            if self.block_precision(k, hyper_values) <= 0.0:
                raise NotPositiveDefinite(
                    f"block {self.blocks[k].block.label!r} precision "
                    "must be positive")
        if self.family == "gaussian" and self.obs_precision(hyper_values) <= 0:
            raise NotPositiveDefinite("observation precision must be positive")

    def prior_precision_dense(self, hyper_values: np.ndarray,
                              jitter: bool = True) -> np.ndarray:
        """Assembled latent prior precision; intrinsic blocks get jitter."""
        q = np.zeros((self.n_latent, self.n_latent))
        for k, (ref, sl) in enumerate(zip(self.blocks, self.block_slices)):
            tau = self.block_precision(k, hyper_values)
            t = ref.block.structure
            sub = q[sl, sl]
            sub[t.rows, t.cols] += tau * t.vals
            off = t.rows != t.cols
            sub[t.cols[off], t.rows[off]] += tau * t.vals[off]
            if jitter and ref.block.rank_deficiency > 0:
                sub[np.diag_indices_from(sub)] += INTRINSIC_JITTER * tau
        return q

    def prior_log_density(self, x: np.ndarray,
                          hyper_values: np.ndarray) -> float:
        """log pi(x | theta) under the rank-aware convention.

        Intrinsic blocks contribute (n - k)/2 powers of tau and 2*pi and
        the log pseudo-determinant of their structure; proper blocks reduce
        to the exact Gaussian normalizing constant.
        """
        total = 0.0
        for k, (ref, sl) in enumerate(zip(self.blocks, self.block_slices)):
            tau = self.block_precision(k, hyper_values)
            b = ref.block
            quad = b.quad_form(x[sl])
            eff = b.effective_dim
            total += 0.5 * eff * (math.log(tau) - _LOG_2PI) \
                + 0.5 * b.logdet_star - 0.5 * tau * quad
        return total

    def hyper_log_prior(self, hyper_values: np.ndarray) -> float:
        return float(sum(p.log_pdf(v)
                         for p, v in zip(self.hypers, hyper_values)))

    def hyper_medians(self) -> np.ndarray:
        return np.array([p.median() for p in self.hypers])


def build_model(y, a_matrix, blocks, family="gaussian", offset_log_e=None,
                obs_precision=None, latent_names=None) -> LatentModel:
    """Validate and assemble a latent model.

    ``obs_precision`` (Gaussian family only) is either a HyperPrior, making
    the observation precision a free hyperparameter, or a positive float.
    Missing responses are marked with NaN and drop out of the likelihood.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise DimensionMismatch("y must be one-dimensional")
    if family not in ("gaussian", "poisson"):
        raise UnsupportedFamily(f"family {family!r} not implemented")
    a_matrix = scipy.sparse.csr_matrix(a_matrix)
    if a_matrix.shape[0] != y.shape[0]:
        raise DimensionMismatch(
            f"A has {a_matrix.shape[0]} rows for {y.shape[0]} observations")
    m = sum(ref.block.n for ref in blocks)
    if a_matrix.shape[1] != m:
        raise DimensionMismatch(
            f"A has {a_matrix.shape[1]} columns but blocks total {m}")
    row_nnz = np.diff(a_matrix.indptr)
    if np.any(row_nnz == 0):
        bad = int(np.nonzero(row_nnz == 0)[0][0])
        raise DimensionMismatch(
            f"observation row {bad} of A touches no latent entry")
    observed = ~np.isnan(y)

    model = LatentModel(y=y, family=family, a_matrix=a_matrix,
                        blocks=list(blocks), latent_names=latent_names or [])
    model.observed = observed

    if family == "poisson":
        if obs_precision is not None:
            raise UnsupportedFamily(
                "Poisson family has no observation precision")
        vals = y[observed]
        if np.any(vals < 0) or np.any(vals != np.round(vals)):
            raise DataError("Poisson responses must be nonnegative integers")
        if offset_log_e is None:
            offset_log_e = np.zeros_like(y)
        offset_log_e = np.asarray(offset_log_e, dtype=np.float64)
        if offset_log_e.shape != y.shape:
            raise DimensionMismatch("offset length must match y")
        model.offset_log_e = offset_log_e
    else:
        if offset_log_e is not None:
            raise UnsupportedFamily("offsets are Poisson-only")
        if obs_precision is None:
            raise DimensionMismatch(
                "Gaussian family needs an observation precision")
        if isinstance(obs_precision, HyperPrior):
            model.obs_prior = obs_precision
        else:
            if obs_precision <= 0:
                raise NotPositiveDefinite(
                    "observation precision must be positive")
            model.obs_fixed_precision = float(obs_precision)

    # latent layout and hyper ordering: block precisions first, observation
    # precision last
    start = 0
    for ref in blocks:
        model.block_slices.append(slice(start, start + ref.block.n))
        start += ref.block.n
    for ref in blocks:
        if ref.prior is not None:
            model._hyper_of_block.append(len(model.hypers))
            model.hypers.append(ref.prior)
        else:
            model._hyper_of_block.append(None)
    if model.obs_prior is not None:
        model._obs_hyper = len(model.hypers)
        model.hypers.append(model.obs_prior)

    if not model.latent_names:
        model.latent_names = []
        for ref, sl in zip(blocks, model.block_slices):
            for j in range(ref.block.n):
                model.latent_names.append(f"{ref.block.label}[{j}]")
    elif len(model.latent_names) != m:
        raise DimensionMismatch("latent_names length must match latent dim")
    return model


# Dense design products beat sparse ones while the matrix stays small;
# beyond this entry count the sparse representation wins again.
DENSE_DESIGN_ENTRY_CAP = 50_000


def dense_design(model: LatentModel) -> np.ndarray | None:
    """Dense copy of A for small designs, None when A should stay sparse."""
    cached = getattr(model, "_dense_design_cache", False)
    if cached is not False:
        return cached
    a = model.a_matrix
    entries = a.shape[0] * a.shape[1]
    dense = a.toarray() if entries <= DENSE_DESIGN_ENTRY_CAP else None
    model._dense_design_cache = dense
    return dense


def log_likelihood(model: LatentModel, x: np.ndarray,
                   hyper_values: np.ndarray | None = None):
    """Total log likelihood and per-observation derivatives in eta.

    Returns ``(value, first, second)`` where the arrays hold the first and
    second derivatives of each observation's log likelihood with respect to
    its linear predictor; missing observations contribute zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != model.n_latent:
        raise DimensionMismatch("latent vector has wrong length")
    ad = dense_design(model)
    eta = ad @ x if ad is not None else model.a_matrix @ x
    cache = getattr(model, "_lik_cache", None)
    if cache is None:
        obs = model.observed
        cache = (bool(obs.all()), int(obs.sum()),
                 float(scipy.special.gammaln(model.y[obs] + 1.0).sum()))
        model._lik_cache = cache
    all_obs, n_observed, gammaln_const = cache
    if model.family == "gaussian":
        tau = model.obs_precision(
            hyper_values if hyper_values is not None else np.zeros(0))
        if all_obs:
            r = model.y - eta
            value = 0.5 * n_observed * (math.log(tau) - _LOG_2PI) \
                - 0.5 * tau * float(r @ r)
            return value, tau * r, np.full(model.n_obs, -tau)
        obs = model.observed
        first = np.zeros(model.n_obs)
        second = np.zeros(model.n_obs)
        r = model.y[obs] - eta[obs]
        value = 0.5 * n_observed * (math.log(tau) - _LOG_2PI) \
            - 0.5 * tau * float(r @ r)
        first[obs] = tau * r
        second[obs] = -tau
    else:
        if all_obs:
            le_eta = model.offset_log_e + eta
            mu = np.exp(le_eta)
            value = float(model.y @ le_eta - mu.sum()) - gammaln_const
            return value, model.y - mu, -mu
        obs = model.observed
        first = np.zeros(model.n_obs)
        second = np.zeros(model.n_obs)
        le_eta = model.offset_log_e[obs] + eta[obs]
        mu = np.exp(le_eta)
        value = float(model.y[obs] @ le_eta - mu.sum()) - gammaln_const
        first[obs] = model.y[obs] - mu
        second[obs] = -mu
    return value, first, second
