"""Shared-component mapping of three diseases over one region graph.

Each area i and disease d contributes a Poisson count with expected
value E_i^d exp(eta), where the predictor stacks a per-disease intercept,
a shared intrinsic spatial field v weighted by a disease-specific delta,
and a disease-specific intrinsic field:

    eta_{i,d} = alpha_d + delta_d * v_i + s_i^d.

The deltas are the conditioning parameters of the outer chain; they enter
the design matrix as fixed weights, leaving a two-hyperparameter
(tau_v, tau_s) Poisson model for the inner engine.  Only ratios of deltas
are identified (rescaling delta and v jointly leaves the predictor
unchanged), so summaries focus on delta ratios and the composite field.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from . import gmrf, latent
from .chain import (
    Chain,
    ChainConfig,
    ConditionedModelFamily,
    ProposalSpec,
    run_chain,
)
from .errors import DataError, NonPositiveDelta
from .graphs import Adjacency
from .marginals import MarginalGrid, mix_marginals
from .priors import HyperPrior, default_precision_prior

DISEASES = 3
DEFAULT_PROPOSAL_SD = 0.1


def default_delta_prior() -> HyperPrior:
    """Log-normal with median 1 and precision 0.1 on the log scale."""
    return HyperPrior(name="delta", kind="lognormal", params=(0.0, 0.1))


@dataclass
class DismapSpec:
    """Counts, expected counts, and priors for the three-disease model."""

    observed: np.ndarray        # n x D counts
    expected: np.ndarray        # n x D positive expectations
    adjacency: Adjacency
    delta_prior: HyperPrior = field(default_factory=default_delta_prior)
    tau_v_prior: HyperPrior = field(
        default_factory=lambda: default_precision_prior("tau_v"))
    tau_s_prior: HyperPrior = field(
        default_factory=lambda: default_precision_prior("tau_s"))
    alpha_precision: float = latent.FIXED_EFFECT_PRECISION
    proposal_sd: float = DEFAULT_PROPOSAL_SD

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=np.float64)
        exp_ = np.asarray(self.expected, dtype=np.float64)
        n = self.adjacency.n
        if obs.shape != (n, DISEASES) or exp_.shape != (n, DISEASES):
            raise DataError(
                f"need {n} x {DISEASES} count tables, got {obs.shape} "
                f"and {exp_.shape}")
        if np.any(obs < 0) or np.any(obs != np.round(obs)):
            raise DataError("observed counts must be nonnegative integers")
        if np.any(exp_ <= 0):
            raise DataError("expected counts must be positive")
        self.observed = obs
        self.expected = exp_
        self._blocks = None
        self._structure_template = None

    @property
    def n(self) -> int:
        return self.adjacency.n

    @property
    def n_latent(self) -> int:
        return DISEASES + self.n + self.n * DISEASES

    def rescaled(self) -> "DismapSpec":
        """Expected counts scaled so each disease's total matches the
        observed total."""
        scale = self.observed.sum(axis=0) / self.expected.sum(axis=0)
        return DismapSpec(
            observed=self.observed, expected=self.expected * scale,
            adjacency=self.adjacency, delta_prior=self.delta_prior,
            tau_v_prior=self.tau_v_prior, tau_s_prior=self.tau_s_prior,
            alpha_precision=self.alpha_precision,
            proposal_sd=self.proposal_sd)

    def blocks(self) -> list:
        """The three latent blocks, built once and reused across deltas."""
        if self._blocks is None:
            shared = gmrf.besag(self.adjacency, label="shared")
            self._blocks = [
                latent.BlockRef(gmrf.iid(DISEASES, label="alpha"),
                                fixed_precision=self.alpha_precision),
                latent.BlockRef(shared, prior=self.tau_v_prior),
                latent.BlockRef(gmrf.replicate(shared, DISEASES,
                                               label="specific"),
                                prior=self.tau_s_prior),
            ]
        return self._blocks


def build_conditional(spec: DismapSpec, delta) -> latent.LatentModel:
    """Poisson model at fixed shared-component weights.

    Observations are stacked disease-major: row d*n + i holds area i of
    disease d.  The weights enter only the shared-field columns of A.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (DISEASES,) or np.any(delta <= 0):
        raise NonPositiveDelta(
            f"need {DISEASES} positive weights, got {delta}")
    n = spec.n
    rows_per = np.arange(n * DISEASES)
    disease = rows_per // n
    area = rows_per % n
    rows = np.concatenate([rows_per] * 3)
    cols = np.concatenate([
        disease,                                   # alpha_d
        DISEASES + area,                           # v_i
        DISEASES + n + disease * n + area,         # s_i^d
    ])
    vals = np.concatenate([
        np.ones(n * DISEASES),
        delta[disease],
        np.ones(n * DISEASES),
    ])
    a = scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=(n * DISEASES, spec.n_latent))
    y = spec.observed.T.reshape(-1)
    log_e = np.log(spec.expected.T.reshape(-1))
    names = ([f"alpha[{d + 1}]" for d in range(DISEASES)]
             + [f"v[{i}]" for i in range(n)]
             + [f"s[{d + 1}][{i}]" for d in range(DISEASES)
                for i in range(n)])
    model = latent.build_model(
        y=y, a_matrix=a, blocks=spec.blocks(), family="poisson",
        offset_log_e=log_e, latent_names=names)
    # dense structure embeddings depend only on the blocks, which are
    # shared across deltas, so reuse them between conditional models
    if spec._structure_template is not None:
        model._dense_structure_cache = spec._structure_template
    else:
        from .engine import _dense_structures
        spec._structure_template = _dense_structures(model)
    return model


def family_for(spec: DismapSpec, workers: int = 1,
               engine_options: dict | None = None,
               track_field: bool = True) -> ConditionedModelFamily:
    track = tuple(range(DISEASES))
    if track_field:
        track += tuple(range(DISEASES, DISEASES + spec.n))
    prior = spec.delta_prior

    def log_prior(theta):
        return sum(prior.log_pdf(t) for t in theta)

    return ConditionedModelFamily(
        names=[f"delta{d + 1}" for d in range(DISEASES)],
        support=[(0.0, math.inf)] * DISEASES,
        log_prior=log_prior,
        proposal=ProposalSpec(kinds=("rw-log",) * DISEASES,
                              sds=(spec.proposal_sd,) * DISEASES),
        builder=lambda theta: (build_conditional(spec, theta), 0.0),
        track=track,
        workers=workers,
        engine_options=dict(engine_options or {}),
    )


def default_chain_config() -> ChainConfig:
    return ChainConfig(burnin=500, total=5500, thin=5,
                       start=(1.0, 1.0, 1.0))


@dataclass
class DismapFit:
    spec: DismapSpec
    chain: Chain
    alpha_marginals: list           # one averaged MarginalGrid per disease
    tau_v_marginal: MarginalGrid
    tau_s_marginal: MarginalGrid
    shared_field_mean: np.ndarray | None   # per-area posterior mean of v
    shared_field_sd: np.ndarray | None
    delta_correlations: np.ndarray  # D x D sample correlation of deltas

    @property
    def delta_cloud(self) -> np.ndarray:
        return self.chain.kept_thetas

    def delta_ratios(self) -> np.ndarray:
        """Kept draws of the identified ratios delta_d / delta_1."""
        cloud = self.delta_cloud
        return cloud[:, 1:] / cloud[:, :1]


def _mixture_moments(states, index):
    """Mean and sd of one latent entry mixed over kept draws."""
    means = np.empty(len(states))
    seconds = np.empty(len(states))
    for k, state in enumerate(states):
        mu, sd = state.fit.tracked_moments(index)
        means[k] = mu
        seconds[k] = sd * sd + mu * mu
    mean = means.mean()
    var = max(seconds.mean() - mean * mean, 0.0)
    return mean, math.sqrt(var)


def fit_dismap(spec: DismapSpec, config: ChainConfig | None = None,
               seed: int = 0, workers: int = 1, track_field: bool = True,
               engine_options: dict | None = None) -> DismapFit:
    """Rescale expectations, run the outer chain over the delta weights,
    and average the conditional marginals."""
    spec = spec.rescaled()
    if config is None:
        config = default_chain_config()
    family = family_for(spec, workers=workers,
                        engine_options=engine_options,
                        track_field=track_field)
    out = run_chain(family, config, seed)
    alpha_marginals = [
        mix_marginals([s.fit.latent_marginal(d, name=f"alpha[{d + 1}]")
                       for s in out.kept], name=f"alpha[{d + 1}]")
        for d in range(DISEASES)]
    tau_v = mix_marginals([s.fit.hyper_marginals[0] for s in out.kept],
                          name="tau_v")
    tau_s = mix_marginals([s.fit.hyper_marginals[1] for s in out.kept],
                          name="tau_s")
    if track_field:
        field_mean = np.empty(spec.n)
        field_sd = np.empty(spec.n)
        for i in range(spec.n):
            field_mean[i], field_sd[i] = _mixture_moments(
                out.kept, DISEASES + i)
    else:
        field_mean = field_sd = None
    cloud = out.kept_thetas
    corr = np.corrcoef(cloud, rowvar=False) if len(cloud) > 1 \
        else np.eye(DISEASES)
    return DismapFit(spec=spec, chain=out,
                     alpha_marginals=alpha_marginals,
                     tau_v_marginal=tau_v, tau_s_marginal=tau_s,
                     shared_field_mean=field_mean, shared_field_sd=field_sd,
                     delta_correlations=corr)


# -- synthetic data ----------------------------------------------------------

def sample_intrinsic(adj: Adjacency, tau: float, rng) -> np.ndarray:
    """Draw from the intrinsic autoregression restricted to the
    sum-to-zero subspace (pseudo-inverse covariance)."""
    block = gmrf.besag(adj)
    q = tau * block.structure.to_dense()
    evals, evecs = np.linalg.eigh(q)
    keep = evals > 1e-9 * evals.max()
    coef = rng.standard_normal(int(keep.sum())) / np.sqrt(evals[keep])
    x = evecs[:, keep] @ coef
    return x - x.mean()


def generate_synthetic(adjacency: Adjacency, delta_true, alpha_true,
                       tau_v: float, tau_s: float, e_base: float,
                       seed: int) -> DismapSpec:
    """Counts drawn from the model itself, for recovery studies."""
    delta_true = np.asarray(delta_true, dtype=np.float64)
    alpha_true = np.asarray(alpha_true, dtype=np.float64)
    if delta_true.shape != (DISEASES,) or np.any(delta_true <= 0):
        raise NonPositiveDelta(f"bad true weights {delta_true}")
    rng = np.random.default_rng(seed)
    n = adjacency.n
    v = sample_intrinsic(adjacency, tau_v, rng)
    expected = np.full((n, DISEASES), float(e_base))
    observed = np.empty((n, DISEASES))
    for d in range(DISEASES):
        s_d = sample_intrinsic(adjacency, tau_s, rng)
        eta = alpha_true[d] + delta_true[d] * v + s_d
        observed[:, d] = rng.poisson(expected[:, d] * np.exp(eta))
    return DismapSpec(observed=observed, expected=expected,
                      adjacency=adjacency)


# -- data files --------------------------------------------------------------

def read_dismap_csv(path):
    """Long table with columns id, disease, observed, expected.

    Returns region ids in first-appearance order, disease labels sorted,
    and the two n x D count tables.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        want = ["id", "disease", "observed", "expected"]
        if header is None or [h.strip().lower() for h in header] != want:
            raise DataError(f"expected columns {want}, got {header}")
        cells = {}
        ids, diseases = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"row {line_no} has {len(row)} fields")
            rid, dis = row[0].strip(), row[1].strip()
            try:
                o, e = float(row[2]), float(row[3])
            except ValueError as err:
                raise DataError(f"row {line_no}: {err}") from None
            if (rid, dis) in cells:
                raise DataError(
                    f"row {line_no}: duplicate entry for ({rid}, {dis})")
            cells[(rid, dis)] = (o, e)
            if rid not in ids:
                ids.append(rid)
            if dis not in diseases:
                diseases.append(dis)
    diseases = sorted(diseases)
    if len(diseases) != DISEASES:
        raise DataError(
            f"need exactly {DISEASES} diseases, found {diseases}")
    observed = np.empty((len(ids), DISEASES))
    expected = np.empty((len(ids), DISEASES))
    for i, rid in enumerate(ids):
        for d, dis in enumerate(diseases):
            if (rid, dis) not in cells:
                raise DataError(f"missing entry for ({rid}, {dis})")
            observed[i, d], expected[i, d] = cells[(rid, dis)]
    return ids, diseases, observed, expected


def make_spec(ids, observed, expected, adjacency: Adjacency,
              **kwargs) -> DismapSpec:
    """Align tabular counts with the adjacency ordering."""
    if sorted(ids) != sorted(adjacency.ids):
        missing = set(adjacency.ids) - set(ids)
        extra = set(ids) - set(adjacency.ids)
        raise DataError(
            f"region ids disagree with adjacency "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    order = [ids.index(rid) for rid in adjacency.ids]
    return DismapSpec(observed=np.asarray(observed)[order],
                      expected=np.asarray(expected)[order],
                      adjacency=adjacency, **kwargs)
