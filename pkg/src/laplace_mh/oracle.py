"""Brute-force references used to validate the fast path.

The quadrature oracle integrates tiny models exhaustively on a tensor
grid, recomputing prior and likelihood terms from the block structures
rather than calling the engine, so disagreement means a real defect.
Sampling oracles for the two applications live here too, along with the
histogram and total-variation utilities the acceptance tests use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.special

from .errors import DimensionMismatch, GridTooCoarse
from .latent import LatentModel
from .marginals import MarginalGrid

_LOG_2PI = math.log(2.0 * math.pi)

QUAD_POINTS = 401
QUAD_SPAN_SD = 8.0
HIST_BINS = 80


# -- exhaustive quadrature ---------------------------------------------------

def _subspace_basis(model: LatentModel) -> np.ndarray:
    cons = model.constraint_matrix
    if cons.shape[0] == 0:
        return np.eye(model.n_latent)
    return scipy.linalg.null_space(cons)


def _prior_terms(model: LatentModel, theta: np.ndarray):
    """Log normalizing constant and full-coordinate precision of the
    latent prior, rebuilt from scratch."""
    m = model.n_latent
    q = np.zeros((m, m))
    const = 0.0
    for k, (ref, sl) in enumerate(zip(model.blocks, model.block_slices)):
        tau = model.block_precision(k, theta)
        t = ref.block.structure.to_dense()
        q[sl, sl] = tau * t
        nb = ref.block.n
        kb = ref.block.rank_deficiency
        eigs = np.linalg.eigvalsh(t)
        positive = eigs[eigs > 1e-10 * max(eigs.max(), 1.0)]
        const += (0.5 * (nb - kb) * (math.log(tau) - _LOG_2PI)
                  + 0.5 * float(np.sum(np.log(positive))))
    return const, q


def _log_lik_mesh(model: LatentModel, eta: np.ndarray,
                  theta: np.ndarray) -> np.ndarray:
    """Vectorized log likelihood over a mesh of linear predictors
    (rows are mesh points)."""
    obs = model.observed
    y = np.where(obs, model.y, 0.0)
    if model.family == "gaussian":
        tau = model.obs_precision(theta)
        r = y[None, :] - eta
        per = 0.5 * (math.log(tau) - _LOG_2PI) - 0.5 * tau * r * r
    else:
        log_mu = model.offset_log_e[None, :] + eta
        per = (y[None, :] * log_mu - np.exp(log_mu)
               - scipy.special.gammaln(y + 1.0)[None, :])
    return np.where(obs[None, :], per, 0.0).sum(axis=1)


@dataclass
class QuadratureResult:
    log_ml: float
    latent_means: np.ndarray
    latent_sds: np.ndarray
    latent_skews: np.ndarray
    latent_marginals: dict = field(default_factory=dict)
    hyper_marginal: MarginalGrid | None = None
    hyper_mean: float = float("nan")
    n_points: int = 0


def quadrature_oracle(model: LatentModel, points_per_dim: int = QUAD_POINTS,
                      span_sd: float = QUAD_SPAN_SD) -> QuadratureResult:
    """Exhaustive tensor-grid integration of a tiny model.

    Works for at most two effective latent dimensions (after removing
    constraint directions) and at most one free hyper.  The integral is
    recomputed on the stride-two subgrid; disagreement beyond 1e-4 in the
    log marginal likelihood raises GridTooCoarse.
    """
    b = _subspace_basis(model)
    n_eff = b.shape[1]
    d_h = model.n_hypers
    if n_eff > 2 or d_h > 1:
        raise DimensionMismatch(
            f"quadrature oracle handles <=2 effective latent dims and <=1 "
            f"hyper, got {n_eff} and {d_h}")
    if points_per_dim % 2 == 0:
        points_per_dim += 1
    a_b = np.asarray(model.a_matrix.todense()) @ b

    prior_h = model.hypers[0] if d_h else None

    def log_joint(u: np.ndarray, z: float | None) -> float:
        theta = np.array([prior_h.from_z(z)]) if d_h else np.zeros(0)
        const, q = _prior_terms(model, theta)
        x = b @ u
        val = (const - 0.5 * float(x @ (q @ x))
               + float(_log_lik_mesh(model, (a_b @ u)[None, :], theta)[0])
               + model.hyper_log_prior(theta))
        if d_h:
            val += prior_h.log_jacobian(z)
        return val

    # crude center and scale for the integration box
    z0 = prior_h.to_z(prior_h.median()) if d_h else None
    start = np.concatenate([np.zeros(n_eff), [z0] if d_h else []])

    def negative(vec):
        u = vec[:n_eff]
        z = vec[n_eff] if d_h else None
        val = log_joint(u, z)
        return -val if np.isfinite(val) else 1e30

    res = scipy.optimize.minimize(negative, start, method="Nelder-Mead",
                                  options={"xatol": 1e-8, "fatol": 1e-8,
                                           "maxiter": 4000, "maxfev": 4000})
    center = res.x
    dim = n_eff + d_h
    h = 0.02
    sds = np.ones(dim)
    hess = np.zeros((dim, dim))
    f0 = -negative(center)
    for i in range(dim):
        e = np.eye(dim)[i]
        hess[i, i] = (-negative(center + h * e) - 2 * f0
                      - negative(center - h * e)) / h ** 2
    curv = -np.diagonal(hess)
    good = curv > 0
    sds[good] = curv[good] ** -0.5

    axes = [np.linspace(center[i] - span_sd * sds[i],
                        center[i] + span_sd * sds[i], points_per_dim)
            for i in range(dim)]
    trap = np.ones(points_per_dim)
    trap[0] = trap[-1] = 0.5
    steps = [ax[1] - ax[0] for ax in axes]

    # latent mesh, shared across hyper slices
    if n_eff == 1:
        u_mesh = axes[0][:, None]
        lat_w = trap.copy()
    else:
        g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
        u_mesh = np.column_stack([g0.ravel(), g1.ravel()])
        lat_w = np.outer(trap, trap).ravel()
    eta_mesh = u_mesh @ a_b.T
    x_vals = u_mesh @ b.T                     # mesh values of every latent

    z_axis = axes[-1] if d_h else [None]
    z_weights = trap if d_h else np.ones(1)

    # stride-two subgrid with its own trapezoid weights, embedded in the
    # fine index space (zeros off the subgrid)
    n_coarse = (points_per_dim + 1) // 2
    trap_c = np.ones(n_coarse)
    trap_c[0] = trap_c[-1] = 0.5
    if n_eff == 1:
        lat_w_coarse = np.zeros_like(lat_w)
        lat_w_coarse[::2] = trap_c
    else:
        w2 = np.zeros((points_per_dim, points_per_dim))
        w2[np.ix_(np.arange(0, points_per_dim, 2),
                  np.arange(0, points_per_dim, 2))] = np.outer(trap_c, trap_c)
        lat_w_coarse = w2.ravel()

    def slice_logf(z):
        theta = np.array([prior_h.from_z(z)]) if d_h else np.zeros(0)
        const, q = _prior_terms(model, theta)
        m_u = b.T @ q @ b
        quad = np.einsum("pi,ij,pj->p", u_mesh, m_u, u_mesh)
        logf = const - 0.5 * quad + _log_lik_mesh(model, eta_mesh, theta) \
            + model.hyper_log_prior(theta)
        if d_h:
            logf = logf + prior_h.log_jacobian(z)
        return logf

    shift = max(float(slice_logf(z).max()) for z in z_axis)

    moment_raw = np.zeros(model.n_latent)
    moment_sq = np.zeros(model.n_latent)
    moment_cu = np.zeros(model.n_latent)
    if n_eff == 1:
        dens_1d = np.zeros(points_per_dim)
        hist_edges = hist_acc = None
    else:
        # with a full 2-d mesh each slab holds enough points that binning
        # artifacts are negligible
        dens_1d = None
        hist_edges = [np.histogram_bin_edges(x_vals[:, i], bins=129)
                      for i in range(model.n_latent)]
        hist_acc = [np.zeros(len(e) - 1) for e in hist_edges]
    hyper_mass = np.zeros(len(z_axis))
    sum_fine = np.zeros(len(z_axis))
    sum_coarse = np.zeros(len(z_axis))

    for t, z in enumerate(z_axis):
        f = np.exp(slice_logf(z) - shift)
        sum_fine[t] = float(lat_w @ f)
        sum_coarse[t] = float(lat_w_coarse @ f)
        hyper_mass[t] = sum_fine[t]
        mass_pts = z_weights[t] * lat_w * f
        moment_raw += mass_pts @ x_vals
        moment_sq += mass_pts @ (x_vals ** 2)
        moment_cu += mass_pts @ (x_vals ** 3)
        if n_eff == 1:
            dens_1d += z_weights[t] * f
        else:
            for i in range(model.n_latent):
                cnt, _ = np.histogram(x_vals[:, i], bins=hist_edges[i],
                                      weights=mass_pts)
                hist_acc[i] += cnt

    fine_lat_vol = float(np.sum(np.log(steps[:n_eff])))
    coarse_lat_vol = float(np.sum(np.log(2.0 * np.array(steps[:n_eff])))) \
        if n_eff else 0.0

    total_fine = float(z_weights @ sum_fine)
    if d_h:
        log_ml = shift + math.log(total_fine) + fine_lat_vol \
            + math.log(steps[-1])
        total_coarse = float(trap_c @ sum_coarse[::2])
        log_ml_coarse = shift + math.log(total_coarse) + coarse_lat_vol \
            + math.log(2.0 * steps[-1])
    else:
        log_ml = shift + math.log(total_fine) + fine_lat_vol
        log_ml_coarse = shift + math.log(float(sum_coarse[0])) \
            + coarse_lat_vol
    if abs(log_ml - log_ml_coarse) > 1e-4:
        raise GridTooCoarse(
            f"refinement moved log ML by {abs(log_ml - log_ml_coarse):.2e}")

    norm = total_fine
    mean = moment_raw / norm
    var = moment_sq / norm - mean ** 2
    sd = np.sqrt(np.maximum(var, 0.0))
    third = (moment_cu / norm - 3 * mean * var - mean ** 3)
    skew = np.where(sd > 0, third / np.maximum(sd, 1e-300) ** 3, 0.0)

    latent_marginals = {}
    if n_eff == 1:
        for i in range(model.n_latent):
            scale = float(b[i, 0])
            if abs(scale) < 1e-14:
                continue
            vals = scale * axes[0]
            dens = dens_1d / abs(scale)
            if scale < 0:
                vals = vals[::-1]
                dens = dens[::-1]
            latent_marginals[i] = MarginalGrid.create(
                f"latent[{i}]", vals, dens)
    else:
        for i in range(model.n_latent):
            edges = hist_edges[i]
            centers = 0.5 * (edges[:-1] + edges[1:])
            widths = np.diff(edges)
            dens = hist_acc[i] / np.maximum(widths, 1e-300)
            if dens.sum() > 0:
                latent_marginals[i] = MarginalGrid.create(
                    f"latent[{i}]", centers, dens)

    hyper_marg = None
    hyper_mean = float("nan")
    if d_h:
        theta_levels = np.array([prior_h.from_z(z) for z in z_axis])
        jac = np.exp(np.array([prior_h.log_jacobian(z) for z in z_axis]))
        dens_theta = hyper_mass / np.maximum(jac, 1e-300)
        order = np.argsort(theta_levels)
        hyper_marg = MarginalGrid.create(prior_h.name, theta_levels[order],
                                         dens_theta[order])
        w_lvl = z_weights * hyper_mass
        hyper_mean = float((w_lvl @ theta_levels) / w_lvl.sum())

    return QuadratureResult(
        log_ml=log_ml, latent_means=mean, latent_sds=sd, latent_skews=skew,
        latent_marginals=latent_marginals, hyper_marginal=hyper_marg,
        hyper_mean=hyper_mean, n_points=len(lat_w) * len(z_axis))


# -- sample-based utilities --------------------------------------------------

def histogram_marginal(samples, name: str = "samples",
                       bins: int = HIST_BINS) -> MarginalGrid:
    """Weighted-free histogram density of raw draws as a MarginalGrid."""
    samples = np.asarray(samples, dtype=np.float64)
    counts, edges = np.histogram(samples, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    dens = counts / np.maximum(widths, 1e-300)
    return MarginalGrid.create(name, centers, dens)


def tv_distance(a: MarginalGrid, b: MarginalGrid,
                resolution: int = 1001) -> float:
    """Total variation distance between two densities on a shared grid."""
    lo = min(a.values[0], b.values[0])
    hi = max(a.values[-1], b.values[-1])
    grid = np.linspace(lo, hi, resolution)
    pa = a.density_at(grid)
    pb = b.density_at(grid)
    za = np.trapezoid(pa, grid)
    zb = np.trapezoid(pb, grid)
    if za > 0:
        pa = pa / za
    if zb > 0:
        pb = pb / zb
    return 0.5 * float(np.trapezoid(np.abs(pa - pb), grid))


def write_samples_csv(path, table: dict) -> None:
    names = list(table)
    columns = [np.asarray(table[k]) for k in names]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_samples_csv(path) -> dict:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return {name: data[:, j] for j, name in enumerate(header)}
