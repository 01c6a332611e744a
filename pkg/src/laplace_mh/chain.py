"""Outer Metropolis-Hastings over the conditioning parameters.

Each iteration proposes new conditioning values, refits the conditional
model through the engine to get its conditional marginal likelihood, and
accepts or rejects with the usual ratio.  Kept draws carry their fit
handles so the conditional marginals can later be averaged into
unconditional ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import FitResult, explore_hypers
from .errors import (
    ConfigError,
    EmptyChain,
    LaplaceMhError,
    NonFiniteValue,
    OutOfRange,
    OutOfSupport,
)

_LOG_2PI = math.log(2.0 * math.pi)

PROPOSAL_KINDS = ("rw", "rw-log")
MAX_AUTOCORR_LAG = 50


@dataclass(frozen=True)
class ProposalSpec:
    """Per-coordinate random-walk proposal, on identity or log scale."""

    kinds: tuple
    sds: tuple

    def __post_init__(self):
        if len(self.kinds) != len(self.sds):
            raise ConfigError("proposal kinds and sds differ in length")
        for kind in self.kinds:
            if kind not in PROPOSAL_KINDS:
                raise ConfigError(f"unknown proposal kind {kind!r}")
        for sd in self.sds:
            if not (float(sd) > 0.0):
                raise OutOfRange(f"proposal sd must be positive, got {sd}")

    @property
    def dim(self) -> int:
        return len(self.kinds)

    def propose(self, theta: np.ndarray, eps: np.ndarray) -> np.ndarray:
        out = np.empty_like(theta)
        for j, (kind, sd) in enumerate(zip(self.kinds, self.sds)):
            if kind == "rw":
                out[j] = theta[j] + sd * eps[j]
            else:
                out[j] = theta[j] * math.exp(sd * eps[j])
        return out

    def log_q(self, frm: np.ndarray, to: np.ndarray) -> float:
        """Log density of proposing ``to`` when currently at ``frm``."""
        total = 0.0
        for j, (kind, sd) in enumerate(zip(self.kinds, self.sds)):
            if kind == "rw":
                r = (to[j] - frm[j]) / sd
                total += -0.5 * r * r - math.log(sd) - 0.5 * _LOG_2PI
            else:
                r = (math.log(to[j]) - math.log(frm[j])) / sd
                total += (-0.5 * r * r - math.log(sd) - 0.5 * _LOG_2PI
                          - math.log(to[j]))
        return total


@dataclass
class MhState:
    """One point of the outer chain with everything the ratio needs."""

    theta: np.ndarray
    log_ml: float          # conditional log ML including Jacobian correction
    log_prior: float
    log_q: float = 0.0     # density of this state being proposed from the other
    fit: FitResult | None = None


def acceptance_log_prob(curr: MhState, prop: MhState) -> float:
    numerator = prop.log_ml + prop.log_prior + curr.log_q
    denominator = curr.log_ml + curr.log_prior + prop.log_q
    if math.isnan(numerator) or math.isnan(denominator):
        raise NonFiniteValue("acceptance ratio is not a number")
    return min(0.0, numerator - denominator)


@dataclass
class ConditionedModelFamily:
    """How to turn a conditioning value into a fitted conditional model.

    ``builder`` maps theta to a (LatentModel, log-Jacobian correction)
    pair; the correction is added to the conditional log ML.  A stub
    family supplies ``log_ml_fn`` instead, which replaces the whole fit
    with an analytic value (used to validate the chain itself).
    """

    names: list
    support: list
    log_prior: Callable
    proposal: ProposalSpec
    builder: Callable | None = None
    log_ml_fn: Callable | None = None
    track: tuple = ()
    workers: int = 1
    engine_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.builder is None) == (self.log_ml_fn is None):
            raise ConfigError(
                "provide exactly one of builder and log_ml_fn")
        if len(self.names) != len(self.support):
            raise ConfigError("names and support differ in length")
        if self.proposal.dim != len(self.names):
            raise ConfigError("proposal dimension does not match names")

    @property
    def dim(self) -> int:
        return len(self.names)

    def in_support(self, theta: np.ndarray) -> bool:
        return all(lo < t < hi
                   for t, (lo, hi) in zip(theta, self.support))

    def evaluate(self, theta: np.ndarray,
                 warm: FitResult | None = None):
        """Conditional log ML (with correction) and fit handle at theta."""
        if self.log_ml_fn is not None:
            return float(self.log_ml_fn(theta)), None
        model, correction = self.builder(theta)
        kwargs = dict(self.engine_options)
        if warm is not None and warm.mode_z.size:
            kwargs.setdefault("start_z", warm.mode_z)
            kwargs.setdefault("x0", warm.mode_x)
        fit = explore_hypers(model, track=self.track, workers=self.workers,
                             **kwargs)
        return fit.log_ml + float(correction), fit


@dataclass(frozen=True)
class ChainConfig:
    burnin: int
    total: int
    thin: int
    start: tuple

    def __post_init__(self):
        if self.burnin < 0 or self.total <= self.burnin:
            raise ConfigError(
                f"need total > burnin >= 0, got {self.total}, {self.burnin}")
        if self.thin < 1:
            raise ConfigError(f"thin must be >= 1, got {self.thin}")

    @property
    def n_kept(self) -> int:
        return (self.total - self.burnin) // self.thin


@dataclass
class Chain:
    names: list
    kept: list            # MhState per kept draw
    acceptance_count: int
    config: ChainConfig
    seed: int
    trace: list           # (iteration, theta, log_ml, accepted) per iteration

    @property
    def kept_thetas(self) -> np.ndarray:
        return np.array([s.theta for s in self.kept])

    @property
    def kept_log_ml(self) -> np.ndarray:
        return np.array([s.log_ml for s in self.kept])

    @property
    def acceptance_rate(self) -> float:
        return self.acceptance_count / self.config.total

    def fits(self) -> list:
        return [s.fit for s in self.kept]


def run_chain(family: ConditionedModelFamily, config: ChainConfig,
              seed: int) -> Chain:
    """Run the outer chain; deterministic given seed and config.

    Out-of-support proposals are rejected without fitting.  A rejected
    iteration repeats the previous state object, fit handle included.
    """
    theta = np.asarray(config.start, dtype=np.float64)
    if theta.shape != (family.dim,):
        raise ConfigError(
            f"start has {theta.size} coordinates, family has {family.dim}")
    if not family.in_support(theta):
        raise OutOfSupport(f"start {theta.tolist()} outside support")

    rng = np.random.default_rng(seed)
    log_ml, fit = _evaluate_recorded(family, theta, None)
    curr = MhState(theta=theta, log_ml=log_ml,
                   log_prior=family.log_prior(theta), fit=fit)

    kept = []
    trace = []
    accepted_count = 0
    for i in range(1, config.total + 1):
        eps = rng.standard_normal(family.dim)
        u = rng.uniform()
        theta_p = family.proposal.propose(curr.theta, eps)
        accepted = False
        if family.in_support(theta_p):
            log_ml_p, fit_p = _evaluate_recorded(family, theta_p, curr.fit)
            prop = MhState(theta=theta_p, log_ml=log_ml_p,
                           log_prior=family.log_prior(theta_p), fit=fit_p,
                           log_q=family.proposal.log_q(curr.theta, theta_p))
            curr.log_q = family.proposal.log_q(theta_p, curr.theta)
            if math.log(u) < acceptance_log_prob(curr, prop):
                curr = prop
                accepted = True
        if accepted:
            accepted_count += 1
        trace.append((i, curr.theta.copy(), curr.log_ml, accepted))
        if i > config.burnin and (i - config.burnin) % config.thin == 0:
            kept.append(curr)
    return Chain(names=list(family.names), kept=kept,
                 acceptance_count=accepted_count, config=config, seed=seed,
                 trace=trace)


def _evaluate_recorded(family, theta, warm):
    try:
        return family.evaluate(theta, warm=warm)
    except LaplaceMhError as err:
        err.theta_c = np.array(theta).tolist()
        err.args = (f"{err.args[0] if err.args else err}"
                    f" [theta_c={np.array(theta).tolist()}]",)
        raise


# -- diagnostics -------------------------------------------------------------

def _autocorrelations(x: np.ndarray, max_lag: int) -> np.ndarray:
    n = len(x)
    centered = x - x.mean()
    c0 = float(centered @ centered) / n
    rho = np.zeros(max_lag + 1)
    rho[0] = 1.0
    for k in range(1, max_lag + 1):
        rho[k] = float(centered[:-k] @ centered[k:]) / (n * c0)
    return rho


def _ess_initial_positive(x: np.ndarray) -> tuple[float, np.ndarray]:
    """Initial-positive-sequence autocorrelation time estimate:
    tau = -1 + 2 * sum of consecutive positive lag-pair sums."""
    n = len(x)
    max_lag = min(MAX_AUTOCORR_LAG, n - 1)
    rho = _autocorrelations(x, max_lag)
    pair_total = 0.0
    m = 0
    while 2 * m + 1 <= max_lag:
        pair = rho[2 * m] + rho[2 * m + 1]
        if m > 0 and pair <= 0.0:
            break
        pair_total += pair
        m += 1
    tau = -1.0 + 2.0 * pair_total
    return n / max(tau, 1e-2), rho


def diagnostics(chain: Chain) -> dict:
    """Acceptance rate, per-coordinate summaries, autocorrelations, and
    effective sample sizes from the kept draws."""
    if not chain.kept:
        raise EmptyChain("no kept draws to summarize")
    arr = chain.kept_thetas
    out = {
        "acceptance_rate": chain.acceptance_rate,
        "n_kept": len(chain.kept),
        "coordinates": {},
    }
    for j, name in enumerate(chain.names):
        x = arr[:, j]
        mean = float(x.mean())
        sd = float(x.std(ddof=1)) if len(x) > 1 else 0.0
        entry = {"mean": mean, "sd": sd}
        if sd <= 0.0:
            entry["degenerate"] = True
            entry["ess"] = 1.0
            entry["autocorr"] = []
            entry["q025"] = entry["q50"] = entry["q975"] = mean
        else:
            ess, rho = _ess_initial_positive(x)
            entry["degenerate"] = False
            entry["ess"] = float(ess)
            entry["autocorr"] = rho[1:].tolist()
            q = np.quantile(x, [0.025, 0.5, 0.975])
            entry["q025"], entry["q50"], entry["q975"] = map(float, q)
        out["coordinates"][name] = entry
    return out


def write_chain_csv(chain: Chain, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration," + ",".join(chain.names) + ",log_ml,accepted\n")
        for (i, theta, log_ml, accepted) in chain.trace:
            coords = ",".join(f"{v:.17g}" for v in theta)
            fh.write(f"{i},{coords},{log_ml:.17g},{int(accepted)}\n")
