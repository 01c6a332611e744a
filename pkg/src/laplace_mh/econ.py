"""Spatial econometric application: a simultaneous-autoregressive model
with spatially lagged response and errors, conditioned on the two spatial
coefficients.

Writing the model for response y with design X and row-standardized
weights W as

    (I - rho W) y = X beta + u,    (I - lambda W) u = eps,

the conditional model at fixed (rho, lambda) is an ordinary Gaussian
regression of the doubly transformed response on the transformed design,
with the two determinant terms entering as an additive correction to the
conditional evidence.  The outer chain walks (rho, lambda); impact
summaries rescale the coefficient marginals per draw.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import gmrf, latent
from .chain import (
    Chain,
    ChainConfig,
    ConditionedModelFamily,
    ProposalSpec,
    run_chain,
)
from .engine import FitResult
from .errors import CovariateNotFound, DataError, OutOfSupport
from .graphs import WeightsMatrix
from .marginals import (
    MarginalGrid,
    mix_marginals,
    reciprocal_grid,
    summarize,
    transform_grid,
)
from .priors import HyperPrior, default_precision_prior
from .spmat import logdet_shifted

DEFAULT_PROPOSAL_SD = 0.25
DENSE_TRACE_LIMIT = 500
TRACE_GRID_POINTS = 200
LAG_PREFIX = "lag:"


@dataclass
class ManskiSpec:
    """Data and priors for the spatially conditioned regression."""

    y: np.ndarray
    x: np.ndarray                    # includes the intercept column
    w: WeightsMatrix
    covariate_names: list
    include_lagged: bool = False
    beta_precision: float = latent.FIXED_EFFECT_PRECISION
    obs_precision_prior: HyperPrior = field(
        default_factory=default_precision_prior)
    proposal_sd: float = DEFAULT_PROPOSAL_SD

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        n = self.y.shape[0]
        if self.x.shape[0] != n or self.w.n != n:
            raise DataError(
                f"covariates ({self.x.shape[0]}), weights ({self.w.n}) and "
                f"response ({n}) disagree on the number of regions")
        if len(self.covariate_names) != self.x.shape[1]:
            raise DataError("one name per covariate column required")
        self._wy = self.w.w @ self.y
        self._wwy = self.w.w @ self._wy
        self._wx = self.w.w @ self.x
        self._wwx = self.w.w @ self._wx

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def support(self):
        lo, hi = self.w.support
        return (lo, hi)

    @property
    def design_names(self) -> list:
        names = list(self.covariate_names)
        if self.include_lagged:
            names += [LAG_PREFIX + nm for nm in self.covariate_names]
        return names


def build_conditional(spec: ManskiSpec, rho: float, lam: float):
    """Conditional Gaussian regression at fixed spatial coefficients,
    plus the log-determinant correction to its evidence."""
    lo, hi = spec.support
    for name, value in (("rho", rho), ("lambda", lam)):
        if not lo < value < hi:
            raise OutOfSupport(
                f"{name} = {value} outside ({lo}, {hi})")
    y_t = spec.y - (rho + lam) * spec._wy + rho * lam * spec._wwy
    x_t = spec.x - lam * spec._wx
    if spec.include_lagged:
        x_lag = spec._wx - lam * spec._wwx
        x_t = np.hstack([x_t, x_lag])
    p = x_t.shape[1]
    block = latent.BlockRef(gmrf.iid(p, label="coefficients"),
                            fixed_precision=spec.beta_precision)
    model = latent.build_model(
        y=y_t, a_matrix=x_t, blocks=[block], family="gaussian",
        obs_precision=spec.obs_precision_prior,
        latent_names=spec.design_names)
    correction = (logdet_shifted(spec.w.eigs, rho)
                  + logdet_shifted(spec.w.eigs, lam))
    return model, correction


def family_for(spec: ManskiSpec, workers: int = 1,
               engine_options: dict | None = None) -> ConditionedModelFamily:
    p = len(spec.design_names)
    engine_options = dict(engine_options or {})
    if spec.include_lagged:
        k = len(spec.covariate_names)
        engine_options.setdefault(
            "track_pairs", tuple((i, i + k) for i in range(k)))
    return ConditionedModelFamily(
        names=["rho", "lambda"],
        support=[spec.support, spec.support],
        log_prior=lambda theta: 0.0,
        proposal=ProposalSpec(kinds=("rw", "rw"),
                              sds=(spec.proposal_sd, spec.proposal_sd)),
        builder=lambda theta: build_conditional(spec, theta[0], theta[1]),
        track=tuple(range(p)),
        workers=workers,
        engine_options=engine_options,
    )


def default_chain_config() -> ChainConfig:
    return ChainConfig(burnin=500, total=5500, thin=5, start=(0.0, 0.0))


@dataclass
class ManskiFit:
    spec: ManskiSpec
    chain: Chain
    coef_marginals: dict              # design name -> averaged MarginalGrid
    precision_marginal: MarginalGrid | None
    sigma2_marginal: MarginalGrid | None

    @property
    def rho_lambda_cloud(self) -> np.ndarray:
        return self.chain.kept_thetas


def fit_manski(spec: ManskiSpec, config: ChainConfig | None = None,
               seed: int = 0, workers: int = 1,
               engine_options: dict | None = None) -> ManskiFit:
    """Run the outer chain and average the conditional marginals."""
    if config is None:
        config = default_chain_config()
    family = family_for(spec, workers=workers,
                        engine_options=engine_options)
    out = run_chain(family, config, seed)
    names = spec.design_names
    coef_marginals = {}
    for k, name in enumerate(names):
        grids = [state.fit.latent_marginal(k, name=name)
                 for state in out.kept]
        coef_marginals[name] = mix_marginals(grids, name=name)
    if out.kept[0].fit.hyper_marginals:
        prec_grids = [state.fit.hyper_marginals[0] for state in out.kept]
        precision = mix_marginals(prec_grids, name="precision")
        sigma2 = reciprocal_grid(precision, name="sigma2")
    else:
        precision = sigma2 = None
    return ManskiFit(spec=spec, chain=out, coef_marginals=coef_marginals,
                     precision_marginal=precision, sigma2_marginal=sigma2)


# -- impacts -----------------------------------------------------------------

class _TraceCache:
    """Traces of (I - rho W)^{-1} and (I - rho W)^{-1} W per rho.

    Dense solves for desk-sized problems; a fixed rho grid with linear
    interpolation once the matrix is large.
    """

    def __init__(self, spec: ManskiSpec):
        self.spec = spec
        self._by_rho: dict = {}
        self._grid = None
        if spec.n > DENSE_TRACE_LIMIT:
            lo, hi = spec.support
            lo = lo if np.isfinite(lo) else -1.0 + 1e-6
            rhos = np.linspace(lo + 1e-6, hi - 1e-6, TRACE_GRID_POINTS)
            pairs = np.array([self._dense(r) for r in rhos])
            self._grid = (rhos, pairs[:, 0], pairs[:, 1])

    def _dense(self, rho: float):
        n = self.spec.n
        inv = np.linalg.solve(np.eye(n) - rho * self.spec.w.w, np.eye(n))
        return (float(np.trace(inv)) / n,
                float(np.trace(inv @ self.spec.w.w)) / n)

    def at(self, rho: float):
        if self._grid is not None:
            rhos, t0, t1 = self._grid
            return (float(np.interp(rho, rhos, t0)),
                    float(np.interp(rho, rhos, t1)))
        if rho not in self._by_rho:
            self._by_rho[rho] = self._dense(rho)
        return self._by_rho[rho]


def _affine_pair_marginal(fit: FitResult, i: int, j: int, c1: float,
                          c2: float, name: str) -> MarginalGrid:
    """Marginal of c1*x_i + c2*x_j under the fit's Gaussian mixture."""
    ii = fit.tracked.index(i)
    jj = fit.tracked.index(j)
    w = fit.weights()
    mu = np.array([c1 * p.tracked_mean[ii] + c2 * p.tracked_mean[jj]
                   for p in fit.grid])
    var = np.array([
        c1 ** 2 * p.tracked_sd[ii] ** 2 + c2 ** 2 * p.tracked_sd[jj] ** 2
        + 2 * c1 * c2 * p.tracked_cov.get((i, j), 0.0)
        for p in fit.grid])
    sd = np.sqrt(np.maximum(var, 1e-24))
    mean = float(w @ mu)
    spread = math.sqrt(max(float(w @ (sd ** 2 + mu ** 2)) - mean ** 2, 0.0))
    spread = max(5.0 * spread, 1e-9 * (1.0 + abs(mean)))
    pts = np.linspace(mean - spread, mean + spread, 75)
    dens = np.zeros_like(pts)
    for wk, mk, sk in zip(w, mu, sd):
        r = (pts - mk) / sk
        dens += wk * np.exp(-0.5 * r * r) / (sk * math.sqrt(2 * math.pi))
    return MarginalGrid.create(name, pts, dens)


def _clamp_scale(c: float) -> float:
    if abs(c) < 1e-12:
        return 1e-12
    return c


def impacts(fit: ManskiFit, covariate: str) -> dict:
    """Direct, indirect, and total impact marginals for one covariate,
    averaged over the kept draws."""
    spec = fit.spec
    if covariate not in spec.covariate_names:
        raise CovariateNotFound(
            f"{covariate!r} not among {spec.covariate_names}")
    names = spec.design_names
    beta_idx = names.index(covariate)
    lag_idx = names.index(LAG_PREFIX + covariate) \
        if spec.include_lagged else None
    cache = _TraceCache(spec)

    per_kind = {"direct": [], "indirect": [], "total": []}
    for state in fit.chain.kept:
        rho = float(state.theta[0])
        c_tot = 1.0 / (1.0 - rho)
        tr0, tr1 = cache.at(rho)
        c_dir = tr0
        c_ind = c_tot - c_dir
        if lag_idx is None:
            base = state.fit.latent_marginal(beta_idx, name=covariate)
            per_kind["total"].append(
                transform_grid(base, _clamp_scale(c_tot), 0.0))
            per_kind["direct"].append(
                transform_grid(base, _clamp_scale(c_dir), 0.0))
            per_kind["indirect"].append(
                transform_grid(base, _clamp_scale(c_ind), 0.0))
        else:
            per_kind["total"].append(_affine_pair_marginal(
                state.fit, beta_idx, lag_idx, c_tot, c_tot, covariate))
            per_kind["direct"].append(_affine_pair_marginal(
                state.fit, beta_idx, lag_idx, c_dir, tr1, covariate))
            # indirect = total - direct, coefficient by coefficient
            per_kind["indirect"].append(_affine_pair_marginal(
                state.fit, beta_idx, lag_idx, c_tot - c_dir, c_tot - tr1,
                covariate))
    return {kind: mix_marginals(grids, name=f"{covariate}:{kind}")
            for kind, grids in per_kind.items()}


def impacts_table(fit: ManskiFit, covariates=None) -> list:
    """Mean and sd of each impact kind per covariate, as flat rows."""
    if covariates is None:
        covariates = [nm for nm in fit.spec.covariate_names
                      if nm != "intercept"]
    rows = []
    for name in covariates:
        grids = impacts(fit, name)
        for kind in ("direct", "indirect", "total"):
            stats = summarize(grids[kind])
            rows.append({"covariate": name, "impact": kind,
                         "mean": stats["mean"], "sd": stats["sd"]})
    return rows


# -- data loading ------------------------------------------------------------

def read_manski_csv(path):
    """Table with columns id, response, then one column per covariate."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3:
            raise DataError(
                "need at least id, response, and one covariate column")
        if header[0].strip().lower() != "id":
            raise DataError(f"first column must be id, got {header[0]!r}")
        ids, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"row {line_no} has {len(row)} fields, "
                    f"header has {len(header)}")
            ids.append(row[0].strip())
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError as err:
                raise DataError(f"row {line_no}: {err}") from None
    data = np.array(rows)
    return ids, data[:, 0], data[:, 1:], [h.strip() for h in header[2:]]


def make_spec(ids, y, covariates, names, adjacency, **kwargs) -> ManskiSpec:
    """Align tabular data with the adjacency ordering, prepend the
    intercept, and row-standardize the weights."""
    from .graphs import row_standardize
    if sorted(ids) != sorted(adjacency.ids):
        missing = set(adjacency.ids) - set(ids)
        extra = set(ids) - set(adjacency.ids)
        raise DataError(
            f"region ids disagree with adjacency "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    order = [ids.index(rid) for rid in adjacency.ids]
    y = np.asarray(y, dtype=np.float64)[order]
    x = np.asarray(covariates, dtype=np.float64)[order]
    x = np.hstack([np.ones((len(y), 1)), x])
    w = row_standardize(adjacency)
    return ManskiSpec(y=y, x=x, w=w,
                      covariate_names=["intercept"] + list(names), **kwargs)
