"""Inner inference engine: Gaussian approximation at the mode, evidence,
and deterministic exploration of the free hyperparameters.

For a fixed hyperparameter vector the latent posterior is approximated by
a Gaussian at its mode (Newton with step halving).  The joint density at
that mode, minus the Gaussian normalizer, gives the Laplace estimate of
the conditional evidence.  Free hyperparameters are explored on a centered
regular grid in transformed coordinates scaled by the numeric curvature at
the hyper mode; grid weights integrate the evidence and mix the latent
marginals.

Linear constraints (sum-to-zero for intrinsic blocks) are enforced by
conditioning after the unconstrained approximation; the evidence uses the
constrained normalizer so comparisons across conditioning parameters that
reshape the observation map stay meaningful.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse

from . import spmat
from .errors import (
    GridOverflow,
    IndexNotTracked,
    ModeSearchFailure,
    NewtonDivergence,
    NonFiniteValue,
)
from .latent import LatentModel, dense_design, log_likelihood
from .marginals import MarginalGrid

_LOG_2PI = math.log(2.0 * math.pi)

NEWTON_MAX_ITER = 50
NEWTON_GRAD_RTOL = 1e-8
GRID_STEP = 0.75
GRID_LOG_DROP = 6.0
GRID_MAX_STEPS = 5
GRID_PREFILTER_SLACK = 3.0
LATENT_GRID_POINTS = 75
HYPER_GRID_POINTS = 75
MODE_SEARCH_TOL = 1e-6


def _dense_structures(model: LatentModel):
    """Per-block dense structure matrices in block-local coordinates with
    their latent slices, cached on the model."""
    cached = getattr(model, "_dense_structure_cache", None)
    if cached is not None:
        return cached
    mats = []
    for ref, sl in zip(model.blocks, model.block_slices):
        sub = ref.block.structure.to_dense()
        mats.append((sl, sub, ref.block.rank_deficiency > 0))
    model._dense_structure_cache = mats
    return mats


def _prior_precision(model: LatentModel, theta: np.ndarray,
                     jitter: bool) -> np.ndarray:
    raw, jit_diag = _prior_matrices(model, theta)
    if not jitter:
        return raw
    q = raw.copy()
    q[np.diag_indices_from(q)] += jit_diag
    return q


def _prior_matrices(model: LatentModel, theta: np.ndarray):
    """Prior precision and the intrinsic-block jitter diagonal.

    Blocks occupy disjoint slices, so assembly writes each scaled block
    into place rather than summing full-size matrices.  The jitter stays
    a vector; factorization adds it to the diagonal on its own copy.
    """
    from .latent import INTRINSIC_JITTER
    m = model.n_latent
    q = np.zeros((m, m))
    jit_diag = np.zeros(m)
    for k, (sl, sub, intrinsic) in enumerate(_dense_structures(model)):
        tau = model.block_precision(k, theta)
        q[sl, sl] = tau * sub
        if intrinsic:
            jit_diag[sl] = INTRINSIC_JITTER * tau
    return q, jit_diag


@dataclass
class GaussianApprox:
    """Gaussian approximation to the latent posterior at fixed hypers."""

    theta: np.ndarray
    mode: np.ndarray            # unconstrained Newton mode
    mean: np.ndarray            # after constraint conditioning
    log_joint: float            # Laplace estimate of log evidence + prior
    tracked: tuple
    tracked_mean: np.ndarray
    tracked_sd: np.ndarray
    tracked_cov: dict = field(default_factory=dict)
    newton_iters: int = 0


def _curvature_scatter(model: LatentModel):
    """Machinery mapping per-observation curvatures to A^T diag(d) A.

    Each observation row of A contributes d_r times the outer product of
    its few nonzeros, so the whole product is a linear map from d to the
    values at a fixed set of matrix positions.  That map (one sparse
    matvec plus a scatter into a dense buffer) is cached on the model.
    """
    cached = getattr(model, "_curvature_scatter_cache", None)
    if cached is not None:
        return cached
    m = model.n_latent
    a = model.a_matrix.tocsr()
    rows_i, rows_j, rows_v, rows_r = [], [], [], []
    for r in range(a.shape[0]):
        idx = a.indices[a.indptr[r]:a.indptr[r + 1]]
        val = a.data[a.indptr[r]:a.indptr[r + 1]]
        for p, i in enumerate(idx):
            for q, j in enumerate(idx):
                rows_i.append(i)
                rows_j.append(j)
                rows_v.append(val[p] * val[q])
                rows_r.append(r)
    flat = np.array(rows_i, dtype=np.int64) * m + np.array(rows_j)
    positions, inverse = np.unique(flat, return_inverse=True)
    weight = scipy.sparse.csr_matrix(
        (np.array(rows_v), (inverse, np.array(rows_r))),
        shape=(positions.size, a.shape[0]))
    cached = (positions, weight)
    model._curvature_scatter_cache = cached
    return cached


def _newton_mode(model: LatentModel, theta: np.ndarray, x0: np.ndarray):
    """Maximize the unnormalized log posterior of the latent field."""
    q_raw, jit_diag = _prior_matrices(model, theta)
    a = model.a_matrix
    ad = dense_design(model)
    m = model.n_latent
    positions, weight = _curvature_scatter(model)
    diag_positions = np.arange(m) * (m + 1)

    def objective(x):
        value, first, second = log_likelihood(model, x, theta)
        return value - 0.5 * float(x @ (q_raw @ x)), first, second

    def precision_at(second):
        # models here stay small enough that dense factorization wins
        buf = q_raw.copy().reshape(-1)
        buf[diag_positions] += jit_diag
        buf[positions] += weight @ (-second)
        return spmat.factor_dense_spd(buf.reshape(m, m))

    x = x0.copy()
    f, first, second = objective(x)
    if not np.isfinite(f):
        x = np.zeros_like(x)
        f, first, second = objective(x)
        if not np.isfinite(f):
            raise NonFiniteValue("objective not finite at the origin")
    factor = None
    factored_second = None
    for it in range(NEWTON_MAX_ITER):
        grad = (ad.T @ first if ad is not None else a.T @ first) \
            - q_raw @ x
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= NEWTON_GRAD_RTOL * (1.0 + abs(f)):
            break
        factor = precision_at(second)
        factored_second = second
        step = factor.solve(grad)
        t = 1.0
        for _ in range(40):
            x_new = x + t * step
            f_new, first_new, second_new = objective(x_new)
            if np.isfinite(f_new) and f_new >= f - 1e-12 * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            raise NewtonDivergence(
                f"no ascent step found at iteration {it}")
        x, f, first, second = x_new, f_new, first_new, second_new
    else:
        raise NewtonDivergence(
            f"gradient norm {gnorm:.3e} after {NEWTON_MAX_ITER} iterations")
    if factor is not None and np.array_equal(factored_second, second):
        # constant-curvature likelihoods land here; the factor is exact
        return x, factor, it + 1
    return x, precision_at(second), it + 1


def gaussian_approx(model: LatentModel, theta, x0=None, track=(),
                    track_pairs=()) -> GaussianApprox:
    """Gaussian approximation and Laplace evidence at fixed hypers.

    ``track`` lists latent indices whose marginal moments are wanted;
    ``track_pairs`` lists index pairs whose posterior covariance is wanted.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (model.n_hypers,):
        from .errors import DimensionMismatch
        raise DimensionMismatch(
            f"expected {model.n_hypers} hyper values, got {theta.shape}")
    model.check_precisions(theta)
    m = model.n_latent
    if x0 is None:
        x0 = np.zeros(m)
    x_star, factor, iters = _newton_mode(model, theta, np.asarray(x0, float))

    track = tuple(int(i) for i in track)
    for i in track:
        if not 0 <= i < m:
            raise IndexNotTracked(f"latent index {i} out of range")

    cons = model.constraint_matrix
    k = cons.shape[0]

    # one solve covers the constraint columns and the tracked unit vectors
    t = len(track)
    rhs = np.zeros((m, k + t))
    if k:
        rhs[:, :k] = cons.T
    for j, i in enumerate(track):
        rhs[i, k + j] = 1.0
    sol = factor.solve(rhs) if k + t else rhs

    cols = {}
    if track:
        v = sol[:, k:]
        for j, i in enumerate(track):
            cols[i] = v[:, j]

    if k:
        z = sol[:, :k]                    # m x k
        s = cons @ z                      # k x k
        s_factor = spmat.factor_dense_spd(s)
        resid = cons @ x_star
        srhs = np.column_stack([resid] + ([z[list(track)].T] if track
                                          else []))
        ssol = s_factor.solve(srhs)
        correction = z @ ssol[:, 0]
        mean = x_star - correction
        gram_logdet = getattr(model, "_constraint_gram_logdet", None)
        if gram_logdet is None:
            gram_logdet = spmat.factor_dense_spd(cons @ cons.T).logdet
            model._constraint_gram_logdet = gram_logdet
        logdet_con = factor.logdet + s_factor.logdet - gram_logdet
        eff_dim = m - k
    else:
        z = None
        s_factor = None
        mean = x_star
        logdet_con = factor.logdet
        eff_dim = m

    tracked_mean = np.array([mean[i] for i in track])
    if track and k:
        sv = ssol[:, 1:]                          # k x t
        corr = {i: sv[:, j] for j, i in enumerate(track)}
    else:
        corr = {}
    tracked_var = []
    for i in track:
        var = float(cols[i][i])
        if k:
            var -= float(z[i] @ corr[i])
        tracked_var.append(max(var, 0.0))
    tracked_sd = np.sqrt(np.array(tracked_var))

    tracked_cov = {}
    for (i, j) in track_pairs:
        if i not in cols or j not in cols:
            raise IndexNotTracked(
                f"covariance pair ({i}, {j}) needs both indices tracked")
        cv = float(cols[i][j])
        if k:
            cv -= float(z[i] @ corr[j])
        tracked_cov[(i, j)] = cv

    lik_value, _, _ = log_likelihood(model, mean, theta)
    log_joint = (model.hyper_log_prior(theta)
                 + model.prior_log_density(mean, theta)
                 + lik_value
                 - (0.5 * logdet_con - 0.5 * eff_dim * _LOG_2PI))
    if not np.isfinite(log_joint):
        raise NonFiniteValue("log joint at mode is not finite")
    return GaussianApprox(theta=theta, mode=x_star, mean=mean,
                          log_joint=log_joint, tracked=track,
                          tracked_mean=tracked_mean, tracked_sd=tracked_sd,
                          tracked_cov=tracked_cov, newton_iters=iters)


def log_joint_at_mode(model: LatentModel, theta) -> float:
    """Hyper prior plus latent prior and likelihood at the mode, minus the
    Gaussian normalizer at its own mode."""
    return gaussian_approx(model, theta).log_joint


@dataclass
class GridPoint:
    offsets: tuple
    z: np.ndarray
    theta: np.ndarray
    log_g: float            # log joint in z coordinates (Jacobian included)
    weight: float
    tracked_mean: np.ndarray
    tracked_sd: np.ndarray
    tracked_cov: dict


@dataclass
class FitResult:
    """Everything learned about one conditional model."""

    log_ml: float
    grid: list            # list of GridPoint
    tracked: tuple
    mode_z: np.ndarray
    mode_theta: np.ndarray
    mode_x: np.ndarray
    hyper_names: list
    hyper_marginals: list  # MarginalGrid per free hyper
    n_evaluations: int = 0
    _marginal_cache: dict = field(default_factory=dict)

    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.grid])

    def tracked_moments(self, index: int) -> tuple[float, float]:
        """Mixture mean and sd of one tracked latent entry."""
        self._require(index)
        j = self.tracked.index(index)
        w = self.weights()
        mu = np.array([p.tracked_mean[j] for p in self.grid])
        sd = np.array([p.tracked_sd[j] for p in self.grid])
        mean = float(w @ mu)
        var = float(w @ (sd ** 2 + mu ** 2) - mean ** 2)
        return mean, math.sqrt(max(var, 0.0))

    def _require(self, index: int) -> None:
        if index not in self.tracked:
            raise IndexNotTracked(
                f"latent index {index} was not tracked at fit time")

    def latent_marginal(self, index: int, name: str | None = None) \
            -> MarginalGrid:
        self._require(index)
        if index in self._marginal_cache:
            return self._marginal_cache[index]
        j = self.tracked.index(index)
        w = self.weights()
        mu = np.array([p.tracked_mean[j] for p in self.grid])
        sd = np.maximum(np.array([p.tracked_sd[j] for p in self.grid]), 1e-12)
        mean = float(w @ mu)
        var = float(w @ (sd ** 2 + mu ** 2) - mean ** 2)
        spread = max(5.0 * math.sqrt(max(var, 0.0)),
                     1e-6 * (1.0 + abs(mean)))
        pts = np.linspace(mean - spread, mean + spread, LATENT_GRID_POINTS)
        dens = np.zeros_like(pts)
        for wk, mk, sk in zip(w, mu, sd):
            r = (pts - mk) / sk
            dens += wk * np.exp(-0.5 * r * r) / (sk * math.sqrt(2 * math.pi))
        grid = MarginalGrid.create(name or f"latent[{index}]", pts, dens)
        self._marginal_cache[index] = grid
        return grid


def latent_marginal(fit: FitResult, index: int) -> MarginalGrid:
    """Posterior marginal of one tracked latent entry (mixture over the
    hyper grid)."""
    return fit.latent_marginal(index)


def _hyper_marginal(prior, name, levels, masses, step_sd, z_hat_j):
    """Continuous marginal for one hyper from per-level grid masses."""
    order = np.argsort(levels)
    levels = np.asarray(levels, dtype=float)[order]
    masses = np.asarray(masses, dtype=float)[order]
    z_levels = z_hat_j + levels * step_sd
    floor = max(masses.max() * 1e-12, 1e-300)
    log_d = np.log(np.maximum(masses, floor) / step_sd)
    # extend one step beyond each end, extrapolating the log density
    if z_levels.size >= 2:
        left = 2 * log_d[0] - log_d[1]
        right = 2 * log_d[-1] - log_d[-2]
    else:
        left = right = log_d[0] - 6.0
    z_ext = np.concatenate([[z_levels[0] - step_sd], z_levels,
                            [z_levels[-1] + step_sd]])
    log_ext = np.concatenate([[left], log_d, [right]])
    z_fine = np.linspace(z_ext[0], z_ext[-1], HYPER_GRID_POINTS)
    log_fine = np.interp(z_fine, z_ext, log_ext)
    dens_z = np.exp(log_fine - log_fine.max())
    theta_fine = np.array([prior.from_z(z) for z in z_fine])
    jac = np.exp(np.array([prior.log_jacobian(z) for z in z_fine]))
    dens_theta = dens_z / np.maximum(jac, 1e-300)
    order = np.argsort(theta_fine)
    return MarginalGrid.create(name, theta_fine[order], dens_theta[order])


def explore_hypers(model: LatentModel, track=(), workers: int = 1,
                   start_z=None, x0=None, grid_step: float = GRID_STEP,
                   log_drop: float = GRID_LOG_DROP,
                   track_pairs=()) -> FitResult:
    """Map the free hyperparameters and integrate the conditional evidence.

    With no free hypers this is a single Laplace evaluation with unit
    weight.  Otherwise the joint is maximized over transformed hypers
    (Nelder-Mead from the prior medians unless ``start_z`` warm-starts it),
    a regular grid scaled by the numeric curvature is laid down, pruned
    where the density falls ``log_drop`` below the mode, and weights,
    evidence, hyper marginals, and mixed latent marginals all come from
    that grid.  Grid evaluations are independent, so ``workers`` may
    parallelize them without changing any result.
    """
    track = tuple(int(i) for i in track)
    track_pairs = tuple((int(i), int(j)) for i, j in track_pairs)
    d = model.n_hypers
    if d > 3:
        raise GridOverflow(
            f"{d} free hyperparameters exceed the factorial grid limit of 3")
    evals = 0

    if d == 0:
        ga = gaussian_approx(model, np.zeros(0), x0=x0, track=track,
                             track_pairs=track_pairs)
        point = GridPoint(offsets=(), z=np.zeros(0), theta=ga.theta,
                          log_g=ga.log_joint, weight=1.0,
                          tracked_mean=ga.tracked_mean,
                          tracked_sd=ga.tracked_sd,
                          tracked_cov=ga.tracked_cov)
        return FitResult(log_ml=ga.log_joint, grid=[point], tracked=track,
                         mode_z=np.zeros(0), mode_theta=ga.theta,
                         mode_x=ga.mode, hyper_names=[],
                         hyper_marginals=[], n_evaluations=1)

    priors_ = model.hypers

    def theta_of(z):
        return np.array([p.from_z(zj) for p, zj in zip(priors_, z)])

    def g_of(z, x_start):
        theta = theta_of(z)
        ga = gaussian_approx(model, theta, x0=x_start)
        jac = sum(p.log_jacobian(zj) for p, zj in zip(priors_, z))
        return ga.log_joint + jac, ga

    # -- mode search ---------------------------------------------------------
    if start_z is None:
        z0 = np.array([p.to_z(p.median()) for p in priors_])
    else:
        z0 = np.asarray(start_z, dtype=np.float64)
    warm = {"x": np.zeros(model.n_latent) if x0 is None
            else np.asarray(x0, float)}
    eval_count = {"n": 0}
    best = {"val": -np.inf, "ga": None, "z": None}

    def negative_g(z):
        try:
            val, ga = g_of(z, warm["x"])
        except (NewtonDivergence, NonFiniteValue):
            return 1e30
        warm["x"] = ga.mode
        eval_count["n"] += 1
        if val > best["val"]:
            best.update(val=val, ga=ga, z=z.copy())
        return -val

    # a warm start sits near the mode already, so the simplex starts small
    edge = 1.0 if start_z is None else 0.1
    simplex = np.vstack([z0] + [z0 + edge * np.eye(d)[j] for j in range(d)])
    res = scipy.optimize.minimize(
        negative_g, z0, method="Nelder-Mead",
        options={"xatol": MODE_SEARCH_TOL, "fatol": MODE_SEARCH_TOL,
                 "maxiter": 400 * d, "maxfev": 400 * d,
                 "initial_simplex": simplex})
    if not np.isfinite(res.fun) or res.fun >= 1e29:
        raise ModeSearchFailure("no finite joint density found")
    z_hat = res.x
    evals += eval_count["n"]

    if best["z"] is not None and np.array_equal(best["z"], z_hat):
        g_hat, ga_hat = best["val"], best["ga"]
    else:
        g_hat, ga_hat = g_of(z_hat, warm["x"])
        evals += 1
    x_hat = ga_hat.mode

    # -- numeric curvature ---------------------------------------------------
    h = 0.05
    hess = np.zeros((d, d))
    g_cache = {}

    def g_at(z):
        key = tuple(np.round(z, 12))
        if key not in g_cache:
            val, _ = g_of(z, x_hat)
            g_cache[key] = val
        return g_cache[key]

    for i in range(d):
        ei = np.eye(d)[i]
        gp = g_at(z_hat + h * ei)
        gm = g_at(z_hat - h * ei)
        hess[i, i] = (gp - 2.0 * g_hat + gm) / h ** 2
        for j in range(i + 1, d):
            ej = np.eye(d)[j]
            gpp = g_at(z_hat + h * ei + h * ej)
            gpm = g_at(z_hat + h * ei - h * ej)
            gmp = g_at(z_hat - h * ei + h * ej)
            gmm = g_at(z_hat - h * ei - h * ej)
            hess[i, j] = hess[j, i] = (gpp - gpm - gmp + gmm) / (4 * h ** 2)
    evals += len(g_cache)

    neg_h = -hess
    try:
        cov_z = np.linalg.inv(neg_h)
        if np.any(np.diagonal(cov_z) <= 0):
            raise np.linalg.LinAlgError("nonpositive curvature")
    except np.linalg.LinAlgError:
        diag = np.abs(np.diagonal(neg_h))
        if np.any(diag <= 0):
            raise ModeSearchFailure(
                "curvature at the hyper mode is not usable") from None
        cov_z = np.diag(1.0 / diag)
    sd_z = np.sqrt(np.diagonal(cov_z))

    # -- grid ----------------------------------------------------------------
    point_cache: dict[tuple, GaussianApprox] = {}
    g_val: dict[tuple, float] = {}

    def eval_offset(off):
        z = z_hat + np.array(off) * grid_step * sd_z
        theta = theta_of(z)
        # warm the Newton start from the nearest already-fixed neighbor: an
        # axis point uses its predecessor on the walk, an interior point the
        # matching axis point.  Both choices depend only on grid geometry,
        # never on evaluation order.
        start = x_hat
        nz = [(j, oj) for j, oj in enumerate(off) if oj != 0]
        if len(nz) == 1:
            j, oj = nz[0]
            prev = tuple(oj - int(np.sign(oj)) if jj == j else 0
                         for jj in range(d))
            if any(prev) and prev in point_cache:
                start = point_cache[prev].mode
        elif nz:
            j, oj = nz[0]
            axis = tuple(oj if jj == j else 0 for jj in range(d))
            if axis in point_cache:
                start = point_cache[axis].mode
        ga = gaussian_approx(model, theta, x0=start, track=track,
                             track_pairs=track_pairs)
        jac = sum(p.log_jacobian(zj) for p, zj in zip(priors_, z))
        return off, z, ga, ga.log_joint + jac

    # per-axis extent: walk outward until the density falls off
    lo = np.zeros(d, dtype=int)
    hi = np.zeros(d, dtype=int)
    for j in range(d):
        for sign, store in ((1, hi), (-1, lo)):
            steps = 1
            while True:
                off = tuple(sign * steps if jj == j else 0 for jj in range(d))
                if off not in g_val:
                    _, _, ga, val = eval_offset(off)
                    point_cache[off] = ga
                    g_val[off] = val
                if g_hat - g_val[off] > log_drop or steps >= GRID_MAX_STEPS:
                    break
                steps += 1
            store[j] = sign * steps

    offsets = [off for off in itertools.product(
        *[range(lo[j], hi[j] + 1) for j in range(d)])]

    # Interior points that both the quadratic model and the summed axis drops
    # place well past the cutoff are skipped outright.  The quadratic form
    # captures correlation between axes; the measured axis values guard the
    # case of tails that fall more slowly than the curvature suggests.
    def predicted_drop(off):
        axis_sum = 0.0
        for j, oj in enumerate(off):
            if oj == 0:
                continue
            axis = tuple(oj if jj == j else 0 for jj in range(d))
            axis_sum += max(0.0, g_hat - g_val[axis])
        u = np.array(off, dtype=float) * grid_step * sd_z
        quad = 0.5 * float(u @ neg_h @ u)
        return min(axis_sum, quad)

    center = tuple(0 for _ in range(d))
    if not track and not track_pairs:
        # nothing tracked, so the mode evaluation serves as the center point
        point_cache[center] = ga_hat
        g_val[center] = g_hat

    todo = [off for off in offsets
            if off not in g_val
            and predicted_drop(off) <= log_drop + GRID_PREFILTER_SLACK]
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(eval_offset, todo))
    else:
        results = [eval_offset(off) for off in todo]
    for off, z, ga, val in results:
        point_cache[off] = ga
        g_val[off] = val
    evals += len(g_val)

    kept = sorted(off for off in offsets
                  if off in g_val and g_hat - g_val[off] <= log_drop)
    if not kept:
        kept = [tuple(0 for _ in range(d))]
        if kept[0] not in point_cache:
            off, z, ga, val = eval_offset(kept[0])
            point_cache[off] = ga
            g_val[off] = val
    # trapezoid rule on the rectangle: halved weight on the outer faces
    def trap_weight(off):
        c = 1.0
        for j in range(d):
            if off[j] in (lo[j], hi[j]):
                c *= 0.5
        return c

    g_arr = np.array([g_val[off] for off in kept])
    g_max = g_arr.max()
    w = np.array([trap_weight(off) for off in kept]) * np.exp(g_arr - g_max)
    w_sum = w.sum()
    w /= w_sum

    cell_log_volume = float(np.sum(np.log(grid_step * sd_z)))
    log_ml = g_max + math.log(w_sum) + cell_log_volume

    grid_points = []
    for off, wk in zip(kept, w):
        ga = point_cache[off]
        z = z_hat + np.array(off) * grid_step * sd_z
        grid_points.append(GridPoint(
            offsets=off, z=z, theta=ga.theta, log_g=g_val[off],
            weight=float(wk), tracked_mean=ga.tracked_mean,
            tracked_sd=ga.tracked_sd, tracked_cov=ga.tracked_cov))

    hyper_margs = []
    for j, prior in enumerate(priors_):
        levels = sorted({off[j] for off in kept})
        # undo this axis's own trapezoid endpoint halving; the density at
        # an outer level is not half of what the grid says it is
        masses = [sum(wk for off, wk in zip(kept, w) if off[j] == lev)
                  * (2.0 if lev in (lo[j], hi[j]) else 1.0)
                  for lev in levels]
        hyper_margs.append(_hyper_marginal(
            prior, prior.name, levels, masses, grid_step * sd_z[j], z_hat[j]))

    return FitResult(log_ml=log_ml, grid=grid_points, tracked=track,
                     mode_z=z_hat, mode_theta=theta_of(z_hat), mode_x=x_hat,
                     hyper_names=[p.name for p in priors_],
                     hyper_marginals=hyper_margs, n_evaluations=evals)
