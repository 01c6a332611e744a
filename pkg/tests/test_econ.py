"""Spatially conditioned regression: transforms, evidence, impacts."""

import io
import math

import numpy as np
import pytest

from laplace_mh import econ, engine, gmrf, graphs, latent
from laplace_mh.chain import ChainConfig, MhState
from laplace_mh.errors import (
    CovariateNotFound,
    DataError,
    OutOfSupport,
)
from laplace_mh.marginals import summarize


def two_cycle_weights():
    adj = graphs.read_gal(io.StringIO("2\n1 1\n2\n2 1\n1\n"))
    return graphs.row_standardize(adj)


def ring_weights(n, chords=(), hops=1):
    lines = [str(n)]
    nb = {i: set() for i in range(n)}
    for i in range(n):
        for h in range(1, hops + 1):
            nb[i].add((i - h) % n)
            nb[i].add((i + h) % n)
    for a, b in chords:
        nb[a].add(b)
        nb[b].add(a)
    for i in range(n):
        lines.append(f"{i + 1} {len(nb[i])}")
        lines.append(" ".join(str(j + 1) for j in sorted(nb[i])))
    adj = graphs.read_gal(io.StringIO("\n".join(lines) + "\n"))
    return graphs.row_standardize(adj)


def simple_spec(n=12, seed=5, p_extra=2, **kwargs):
    rng = np.random.default_rng(seed)
    w = ring_weights(n, chords=((0, n // 2), (1, n // 3)))
    x = np.hstack([np.ones((n, 1)), rng.standard_normal((n, p_extra))])
    beta = np.arange(1, p_extra + 2, dtype=float)
    y = x @ beta + rng.standard_normal(n)
    names = ["intercept"] + [f"x{j}" for j in range(1, p_extra + 1)]
    return econ.ManskiSpec(y=y, x=x, w=w, covariate_names=names, **kwargs)


class TestTransforms:
    def test_two_cycle_jacobian(self):
        w = two_cycle_weights()
        spec = econ.ManskiSpec(
            y=np.array([1.0, 2.0]), x=np.ones((2, 1)), w=w,
            covariate_names=["intercept"])
        _, corr = econ.build_conditional(spec, 0.5, 0.0)
        assert corr == pytest.approx(math.log(0.75), abs=1e-12)
        _, corr2 = econ.build_conditional(spec, 0.5, 0.5)
        assert corr2 == pytest.approx(2 * math.log(0.75), abs=1e-12)

    def test_transformed_response_and_design(self):
        spec = simple_spec()
        rho, lam = 0.3, 0.2
        model, _ = econ.build_conditional(spec, rho, lam)
        wmat = spec.w.w
        b_rho = np.eye(spec.n) - rho * wmat
        b_lam = np.eye(spec.n) - lam * wmat
        np.testing.assert_allclose(model.y, b_lam @ (b_rho @ spec.y),
                                   atol=1e-12)
        np.testing.assert_allclose(model.a_matrix.toarray(),
                                   b_lam @ spec.x, atol=1e-12)

    def test_lagged_design_block(self):
        spec = simple_spec(include_lagged=True)
        lam = 0.25
        model, _ = econ.build_conditional(spec, 0.1, lam)
        wmat = spec.w.w
        b_lam = np.eye(spec.n) - lam * wmat
        expected = np.hstack([b_lam @ spec.x, b_lam @ (wmat @ spec.x)])
        np.testing.assert_allclose(model.a_matrix.toarray(), expected,
                                   atol=1e-12)
        assert model.latent_names[3:] == ["lag:intercept", "lag:x1",
                                          "lag:x2"]

    def test_out_of_support(self):
        spec = simple_spec()
        with pytest.raises(OutOfSupport):
            econ.build_conditional(spec, 1.0, 0.0)
        lo, _ = spec.support
        with pytest.raises(OutOfSupport):
            econ.build_conditional(spec, 0.0, lo - 0.01)

    def test_zero_point_is_plain_regression(self):
        spec = simple_spec()
        model, corr = econ.build_conditional(spec, 0.0, 0.0)
        assert corr == 0.0
        np.testing.assert_array_equal(model.y, spec.y)
        np.testing.assert_allclose(model.a_matrix.toarray(), spec.x,
                                   atol=0.0)
        plain = latent.build_model(
            y=spec.y, a_matrix=spec.x,
            blocks=[latent.BlockRef(gmrf.iid(3, label="coefficients"),
                                    fixed_precision=spec.beta_precision)],
            family="gaussian", obs_precision=spec.obs_precision_prior)
        fit_a = engine.explore_hypers(model)
        fit_b = engine.explore_hypers(plain)
        assert fit_a.log_ml + corr == pytest.approx(fit_b.log_ml, abs=1e-6)


class TestConditionalPosterior:
    def test_matches_generalized_least_squares(self):
        """Fixed obs precision makes the conditional fully conjugate."""
        tau, kappa = 2.0, 1e-3
        spec = simple_spec(obs_precision_prior=tau)
        rho, lam = 0.3, 0.2
        model, corr = econ.build_conditional(spec, rho, lam)
        ga = engine.gaussian_approx(model, np.zeros(0), track=(0, 1, 2))
        x_t = model.a_matrix.toarray()
        y_t = model.y
        post_prec = tau * x_t.T @ x_t + kappa * np.eye(3)
        post_mean = np.linalg.solve(post_prec, tau * x_t.T @ y_t)
        np.testing.assert_allclose(ga.tracked_mean, post_mean, atol=1e-6)
        post_sd = np.sqrt(np.diag(np.linalg.inv(post_prec)))
        np.testing.assert_allclose(ga.tracked_sd, post_sd, atol=1e-6)

    def test_evidence_matches_dense_normal(self):
        """Conditional evidence (plus correction) equals the marginal
        density of the original response under the joint Gaussian."""
        tau, kappa = 2.0, 1e-3
        spec = simple_spec(obs_precision_prior=tau)
        rho, lam = 0.35, -0.15
        model, corr = econ.build_conditional(spec, rho, lam)
        fit = engine.explore_hypers(model)
        x_t = model.a_matrix.toarray()
        cov = x_t @ x_t.T / kappa + np.eye(spec.n) / tau
        sign, logdet = np.linalg.slogdet(2 * math.pi * cov)
        quad = model.y @ np.linalg.solve(cov, model.y)
        log_density_transformed = -0.5 * (logdet + quad)
        assert sign > 0
        assert fit.log_ml == pytest.approx(log_density_transformed,
                                           abs=1e-6)


class TestTraceFactors:
    def test_two_cycle_values(self):
        w = two_cycle_weights()
        spec = econ.ManskiSpec(
            y=np.zeros(2), x=np.ones((2, 1)), w=w,
            covariate_names=["intercept"])
        cache = econ._TraceCache(spec)
        t0, t1 = cache.at(0.5)
        assert t0 == pytest.approx(4.0 / 3.0, abs=1e-12)
        assert t1 == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_matches_eigenvalue_identity(self):
        """n^-1 tr((I - rho W)^-1) equals the mean of 1/(1 - rho e_i)."""
        spec = simple_spec(n=15)
        cache = econ._TraceCache(spec)
        for rho in (-0.6, 0.0, 0.4, 0.85):
            t0, _ = cache.at(rho)
            expected = np.mean(1.0 / (1.0 - rho * spec.w.eigs.values))
            assert t0 == pytest.approx(expected, abs=1e-10)

    def test_row_stochastic_identity(self):
        """Grand sum of the inverse over n equals 1/(1 - rho)."""
        spec = simple_spec(n=15)
        for rho in (-0.4, 0.2, 0.7):
            inv = np.linalg.solve(np.eye(spec.n) - rho * spec.w.w,
                                  np.eye(spec.n))
            assert inv.sum() / spec.n == pytest.approx(
                1.0 / (1.0 - rho), abs=1e-8)

    def test_lagged_trace_identity(self):
        """tr(S W) follows from tr(S) via S W = (S - I) / rho."""
        spec = simple_spec(n=15)
        cache = econ._TraceCache(spec)
        for rho in (-0.3, 0.1, 0.6):
            t0, t1 = cache.at(rho)
            assert t1 == pytest.approx((t0 - 1.0) / rho, abs=1e-10)
            expected = np.mean(spec.w.eigs.values
                               / (1.0 - rho * spec.w.eigs.values))
            assert t1 == pytest.approx(expected, abs=1e-10)

    def test_grid_fallback_interpolates(self, monkeypatch):
        monkeypatch.setattr(econ, "DENSE_TRACE_LIMIT", 4)
        spec = simple_spec(n=15)
        gridded = econ._TraceCache(spec)
        assert gridded._grid is not None
        monkeypatch.setattr(econ, "DENSE_TRACE_LIMIT", 500)
        exact = econ._TraceCache(spec)
        t0g, t1g = gridded.at(0.33)
        t0e, t1e = exact.at(0.33)
        assert t0g == pytest.approx(t0e, abs=1e-3)
        assert t1g == pytest.approx(t1e, abs=1e-3)


def manual_fit(spec, thetas):
    """A ManskiFit whose kept draws sit at the given conditioning values."""
    family = econ.family_for(spec)
    kept = []
    for theta in thetas:
        theta = np.asarray(theta, dtype=np.float64)
        log_ml, fit = family.evaluate(theta)
        kept.append(MhState(theta=theta, log_ml=log_ml, log_prior=0.0,
                            fit=fit))
    from laplace_mh.chain import Chain
    config = ChainConfig(burnin=0, total=len(thetas), thin=1,
                         start=tuple(thetas[0]))
    chain = Chain(names=["rho", "lambda"], kept=kept,
                  acceptance_count=len(thetas), config=config, seed=0,
                  trace=[])
    coef = {}
    for k, name in enumerate(spec.design_names):
        from laplace_mh.marginals import mix_marginals
        coef[name] = mix_marginals(
            [s.fit.latent_marginal(k, name=name) for s in kept], name=name)
    return econ.ManskiFit(spec=spec, chain=chain, coef_marginals=coef,
                          precision_marginal=None, sigma2_marginal=None)


class TestImpacts:
    def test_degenerate_at_zero(self):
        """With rho pinned at zero the indirect impact collapses."""
        spec = simple_spec(obs_precision_prior=2.0)
        fit = manual_fit(spec, [(0.0, 0.0)])
        grids = econ.impacts(fit, "x1")
        direct = summarize(grids["direct"])
        total = summarize(grids["total"])
        indirect = summarize(grids["indirect"])
        assert direct["mean"] == pytest.approx(total["mean"], abs=1e-9)
        assert abs(indirect["mean"]) < 1e-9
        assert indirect["sd"] < 1e-9

    def test_single_draw_scalars(self):
        """At one draw the impact means are the scaled coefficient mean."""
        spec = simple_spec(obs_precision_prior=2.0)
        rho = 0.4
        fit = manual_fit(spec, [(rho, 0.1)])
        state = fit.chain.kept[0]
        beta_mean, _ = state.fit.tracked_moments(1)
        cache = econ._TraceCache(spec)
        c_dir, _ = cache.at(rho)
        c_tot = 1.0 / (1.0 - rho)
        grids = econ.impacts(fit, "x1")
        assert summarize(grids["total"])["mean"] == pytest.approx(
            c_tot * beta_mean, rel=1e-3)
        assert summarize(grids["direct"])["mean"] == pytest.approx(
            c_dir * beta_mean, rel=1e-3)
        assert summarize(grids["indirect"])["mean"] == pytest.approx(
            (c_tot - c_dir) * beta_mean, rel=1e-3)

    def test_mean_decomposition_across_draws(self):
        spec = simple_spec(obs_precision_prior=2.0)
        fit = manual_fit(spec, [(0.2, 0.1), (0.5, -0.1), (0.35, 0.3)])
        grids = econ.impacts(fit, "x2")
        m_tot = summarize(grids["total"])["mean"]
        m_dir = summarize(grids["direct"])["mean"]
        m_ind = summarize(grids["indirect"])["mean"]
        scale = abs(m_tot) + summarize(grids["total"])["sd"]
        assert abs(m_tot - (m_dir + m_ind)) < 5e-3 * scale

    def test_unknown_covariate(self):
        spec = simple_spec(obs_precision_prior=2.0)
        fit = manual_fit(spec, [(0.0, 0.0)])
        with pytest.raises(CovariateNotFound):
            econ.impacts(fit, "nope")

    def test_lagged_impacts(self):
        """With lagged covariates the impact mixes both coefficients."""
        spec = simple_spec(include_lagged=True, obs_precision_prior=2.0)
        rho = 0.3
        fit = manual_fit(spec, [(rho, 0.0)])
        state = fit.chain.kept[0]
        names = spec.design_names
        b_idx = names.index("x1")
        g_idx = names.index("lag:x1")
        beta_mean, _ = state.fit.tracked_moments(b_idx)
        gamma_mean, _ = state.fit.tracked_moments(g_idx)
        cache = econ._TraceCache(spec)
        t0, t1 = cache.at(rho)
        c_tot = 1.0 / (1.0 - rho)
        grids = econ.impacts(fit, "x1")
        want_total = c_tot * (beta_mean + gamma_mean)
        want_direct = t0 * beta_mean + t1 * gamma_mean
        assert summarize(grids["total"])["mean"] == pytest.approx(
            want_total, rel=1e-3, abs=1e-6)
        assert summarize(grids["direct"])["mean"] == pytest.approx(
            want_direct, rel=1e-3, abs=1e-6)
        assert summarize(grids["indirect"])["mean"] == pytest.approx(
            want_total - want_direct, rel=1e-3, abs=1e-6)
        # the pair covariance was tracked for the mixture sds
        assert (b_idx, g_idx) in state.fit.grid[0].tracked_cov

    def test_impacts_table_rows(self):
        spec = simple_spec(obs_precision_prior=2.0)
        fit = manual_fit(spec, [(0.2, 0.0)])
        rows = econ.impacts_table(fit)
        assert len(rows) == 6  # two covariates, three kinds each
        assert {r["covariate"] for r in rows} == {"x1", "x2"}
        assert {r["impact"] for r in rows} == {"direct", "indirect",
                                               "total"}


class TestFit:
    def test_recovers_zero_spatial_coefficients(self):
        rng = np.random.default_rng(22)
        n = 30
        w = ring_weights(n, hops=2)
        x = np.hstack([np.ones((n, 1)), rng.standard_normal((n, 2))])
        beta = np.array([1.0, 2.0, -1.0])
        y = x @ beta + rng.standard_normal(n)
        spec = econ.ManskiSpec(
            y=y, x=x, w=w, covariate_names=["intercept", "x1", "x2"])
        config = ChainConfig(burnin=200, total=1700, thin=5,
                             start=(0.0, 0.0))
        fit = econ.fit_manski(spec, config=config, seed=1)
        cloud = fit.rho_lambda_cloud
        assert cloud.shape == (300, 2)
        assert abs(cloud[:, 0].mean()) < 0.15
        assert abs(cloud[:, 1].mean()) < 0.15
        # means for this dataset from conjugate quadrature over a dense
        # (rho, lambda, tau) grid, computed independently of the engine
        assert cloud[:, 0].mean() == pytest.approx(-0.0413, abs=0.06)
        assert cloud[:, 1].mean() == pytest.approx(0.0158, abs=0.06)
        for name, truth in zip(["intercept", "x1", "x2"], beta):
            stats = summarize(fit.coef_marginals[name])
            assert abs(stats["mean"] - truth) < 4.0 * stats["sd"]
        sig = summarize(fit.sigma2_marginal)
        assert 0.3 < sig["mean"] < 3.0
        assert 0.05 < fit.chain.acceptance_rate < 0.95


class TestCsv:
    def test_round_trip_alignment(self, tmp_path):
        gal = "3\nA 2\nB C\nB 1\nA\nC 1\nA\n"
        adj = graphs.read_gal(io.StringIO(gal))
        path = tmp_path / "toy.csv"
        path.write_text(
            "id,crime,income,value\n"
            "C,3.0,0.3,30.0\n"
            "A,1.0,0.1,10.0\n"
            "B,2.0,0.2,20.0\n")
        ids, y, covs, names = econ.read_manski_csv(path)
        assert ids == ["C", "A", "B"]
        assert names == ["income", "value"]
        spec = econ.make_spec(ids, y, covs, names, adj)
        # rows follow the adjacency ordering A, B, C
        np.testing.assert_allclose(spec.y, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(spec.x[:, 0], 1.0)
        np.testing.assert_allclose(spec.x[:, 1], [0.1, 0.2, 0.3])
        assert spec.covariate_names == ["intercept", "income", "value"]

    def test_header_and_row_errors(self, tmp_path):
        bad_header = tmp_path / "h.csv"
        bad_header.write_text("region,crime,income\nA,1,2\n")
        with pytest.raises(DataError):
            econ.read_manski_csv(bad_header)
        ragged = tmp_path / "r.csv"
        ragged.write_text("id,crime,income\nA,1,2\nB,3\n")
        with pytest.raises(DataError):
            econ.read_manski_csv(ragged)
        text = tmp_path / "t.csv"
        text.write_text("id,crime,income\nA,1,two\n")
        with pytest.raises(DataError):
            econ.read_manski_csv(text)

    def test_id_mismatch(self):
        adj = graphs.read_gal(io.StringIO("2\nA 1\nB\nB 1\nA\n"))
        with pytest.raises(DataError):
            econ.make_spec(["A", "X"], np.zeros(2), np.zeros((2, 1)),
                           ["inc"], adj)

    def test_shape_mismatch(self):
        w = two_cycle_weights()
        with pytest.raises(DataError):
            econ.ManskiSpec(y=np.zeros(3), x=np.ones((3, 1)), w=w,
                            covariate_names=["intercept"])
        with pytest.raises(DataError):
            econ.ManskiSpec(y=np.zeros(2), x=np.ones((2, 1)), w=w,
                            covariate_names=["a", "b"])
