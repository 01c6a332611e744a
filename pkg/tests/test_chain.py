"""Outer chain checks: acceptance ratio algebra, kept-draw accounting,
stationarity against conjugate closed forms, and diagnostics."""

from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.stats

from laplace_mh import chain as mh
from laplace_mh import gmrf, latent
from laplace_mh.errors import (
    ConfigError,
    EmptyChain,
    OutOfRange,
    OutOfSupport,
)


def flat_prior(theta):
    return 0.0


def stub_family(log_ml_fn, support=((-50.0, 50.0),), sd=2.0, kind="rw",
                names=("theta",)):
    return mh.ConditionedModelFamily(
        names=list(names),
        support=list(support),
        log_prior=flat_prior,
        proposal=mh.ProposalSpec(kinds=(kind,) * len(names),
                                 sds=(sd,) * len(names)),
        log_ml_fn=log_ml_fn,
    )


class TestAcceptanceLogProb:
    def test_equal_states_accept(self):
        a = mh.MhState(np.array([0.0]), log_ml=-3.0, log_prior=0.0)
        b = mh.MhState(np.array([1.0]), log_ml=-3.0, log_prior=0.0)
        assert mh.acceptance_log_prob(a, b) == 0.0

    def test_half_likelihood_ratio(self):
        a = mh.MhState(np.array([0.0]), log_ml=-3.0, log_prior=0.0)
        b = mh.MhState(np.array([1.0]), log_ml=-3.0 + math.log(0.5),
                       log_prior=0.0)
        assert mh.acceptance_log_prob(a, b) == pytest.approx(math.log(0.5))

    def test_log_scale_q_ratio(self):
        # on the log scale the proposal-density ratio adds log(prop/curr)
        spec = mh.ProposalSpec(kinds=("rw-log",), sds=(0.3,))
        curr_t, prop_t = np.array([2.0]), np.array([3.0])
        q_fwd = spec.log_q(curr_t, prop_t)
        q_rev = spec.log_q(prop_t, curr_t)
        assert q_rev - q_fwd == pytest.approx(math.log(3.0 / 2.0), abs=1e-12)
        # cross-check each density against scipy's lognormal
        want_fwd = scipy.stats.lognorm.logpdf(3.0, s=0.3,
                                              scale=2.0)
        assert q_fwd == pytest.approx(want_fwd, abs=1e-12)

    def test_nan_raises(self):
        from laplace_mh.errors import NonFiniteValue
        a = mh.MhState(np.array([0.0]), log_ml=float("nan"), log_prior=0.0)
        b = mh.MhState(np.array([1.0]), log_ml=-1.0, log_prior=0.0)
        with pytest.raises(NonFiniteValue):
            mh.acceptance_log_prob(a, b)


class TestProposalSpec:
    def test_zero_sd_rejected(self):
        with pytest.raises(OutOfRange):
            mh.ProposalSpec(kinds=("rw",), sds=(0.0,))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            mh.ProposalSpec(kinds=("walk",), sds=(1.0,))

    def test_log_walk_stays_positive(self):
        spec = mh.ProposalSpec(kinds=("rw-log",), sds=(1.5,))
        theta = np.array([0.01])
        for eps in (-3.0, 0.0, 3.0):
            assert spec.propose(theta, np.array([eps]))[0] > 0


class TestRunChainAccounting:
    def test_kept_count_with_paper_config(self):
        family = stub_family(lambda t: 0.0)
        config = mh.ChainConfig(burnin=500, total=5500, thin=5,
                                start=(0.0,))
        out = mh.run_chain(family, config, seed=1)
        assert len(out.kept) == 1000
        assert config.n_kept == 1000

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            mh.ChainConfig(burnin=10, total=10, thin=1, start=(0.0,))
        with pytest.raises(ConfigError):
            mh.ChainConfig(burnin=0, total=10, thin=0, start=(0.0,))

    def test_start_outside_support_rejected(self):
        family = stub_family(lambda t: 0.0, support=((0.0, 1.0),))
        config = mh.ChainConfig(burnin=0, total=10, thin=1, start=(2.0,))
        with pytest.raises(OutOfSupport):
            mh.run_chain(family, config, seed=0)

    def test_same_seed_identical_chains(self):
        family = stub_family(lambda t: -0.5 * float(t[0]) ** 2)
        config = mh.ChainConfig(burnin=10, total=200, thin=2, start=(0.0,))
        a = mh.run_chain(family, config, seed=42)
        b = mh.run_chain(family, config, seed=42)
        np.testing.assert_array_equal(a.kept_thetas, b.kept_thetas)
        assert a.acceptance_count == b.acceptance_count

    def test_different_seed_differs(self):
        family = stub_family(lambda t: -0.5 * float(t[0]) ** 2)
        config = mh.ChainConfig(burnin=10, total=200, thin=2, start=(0.0,))
        a = mh.run_chain(family, config, seed=1)
        b = mh.run_chain(family, config, seed=2)
        assert not np.array_equal(a.kept_thetas, b.kept_thetas)

    def test_out_of_support_proposals_behave_like_rejections(self):
        family = stub_family(lambda t: 0.0, support=((0.0, 1.0),), sd=50.0)
        config = mh.ChainConfig(burnin=0, total=300, thin=1, start=(0.5,))
        out = mh.run_chain(family, config, seed=3)
        assert len(out.kept) == 300
        assert 0.0 <= out.acceptance_rate < 0.2
        assert np.all(out.kept_thetas > 0.0)
        assert np.all(out.kept_thetas < 1.0)


class TestConjugateToy:
    """Gaussian latent model conditioned on a location shift of the
    response; the shift posterior has a dense closed form."""

    def setup_method(self):
        rng = np.random.default_rng(21)
        self.n = 6
        self.y = rng.normal(size=self.n) + 1.5
        self.tau_y = 2.0
        self.tau_b = 1.0
        self.prior_prec = 1e-4
        a = np.ones((self.n, 1))
        self.a = a
        cov = np.eye(self.n) / self.tau_y + a @ a.T / self.tau_b
        prec_data = float(np.ones(self.n) @
                          np.linalg.solve(cov, np.ones(self.n)))
        mean_data = float(np.ones(self.n) @ np.linalg.solve(cov, self.y))
        post_prec = prec_data + self.prior_prec
        self.post_mean = mean_data / post_prec
        self.post_sd = post_prec ** -0.5

    def make_family(self):
        y = self.y

        def builder(theta):
            block = latent.BlockRef(gmrf.iid(1),
                                    fixed_precision=self.tau_b)
            model = latent.build_model(
                y=y - theta[0], a_matrix=self.a, blocks=[block],
                family="gaussian", obs_precision=self.tau_y)
            return model, 0.0

        return mh.ConditionedModelFamily(
            names=["shift"],
            support=[(-100.0, 100.0)],
            log_prior=lambda t: -0.5 * self.prior_prec * float(t[0]) ** 2,
            proposal=mh.ProposalSpec(kinds=("rw",), sds=(1.0,)),
            builder=builder,
        )

    def test_posterior_moments_match_closed_form(self):
        config = mh.ChainConfig(burnin=200, total=4200, thin=2,
                                start=(0.0,))
        out = mh.run_chain(self.make_family(), config, seed=7)
        stats = mh.diagnostics(out)
        coord = stats["coordinates"]["shift"]
        se_mean = coord["sd"] / math.sqrt(coord["ess"])
        assert abs(coord["mean"] - self.post_mean) < 3 * se_mean
        # sd of the sd estimate is roughly sd/sqrt(2*ess)
        se_sd = coord["sd"] / math.sqrt(2 * coord["ess"])
        assert abs(coord["sd"] - self.post_sd) < 3 * se_sd

    def test_rejected_iterations_share_fit_handles(self):
        config = mh.ChainConfig(burnin=0, total=120, thin=1, start=(0.0,))
        family = self.make_family()
        family = mh.ConditionedModelFamily(
            names=family.names, support=family.support,
            log_prior=family.log_prior,
            proposal=mh.ProposalSpec(kinds=("rw",), sds=(60.0,)),
            builder=family.builder)
        out = mh.run_chain(family, config, seed=5)
        shared = 0
        for prev, curr in zip(out.kept, out.kept[1:]):
            if np.array_equal(prev.theta, curr.theta):
                assert curr.fit is prev.fit
                shared += 1
        assert shared > 10


class TestStubStationarity:
    def test_ks_against_analytic_posterior(self):
        mu, sd = 2.0, 0.5

        def log_ml(theta):
            return -0.5 * ((theta[0] - mu) / sd) ** 2

        family = stub_family(log_ml, sd=1.25)
        config = mh.ChainConfig(burnin=500, total=25500, thin=5,
                                start=(2.0,))
        out = mh.run_chain(family, config, seed=11)
        draws = out.kept_thetas[:, 0]
        assert len(draws) == 5000
        stat, _ = scipy.stats.kstest(draws, "norm", args=(mu, sd))
        assert stat < 0.05


class TestDiagnostics:
    def make_injected_chain(self, draws):
        states = [mh.MhState(np.array([v]), log_ml=0.0, log_prior=0.0)
                  for v in draws]
        config = mh.ChainConfig(burnin=0, total=len(draws), thin=1,
                                start=(0.0,))
        return mh.Chain(names=["x"], kept=states,
                        acceptance_count=len(draws), config=config, seed=0,
                        trace=[])

    def test_iid_normal_ess_near_full(self):
        rng = np.random.default_rng(0)
        out = mh.diagnostics(self.make_injected_chain(
            rng.normal(size=5000)))
        ess = out["coordinates"]["x"]["ess"]
        assert 4000 < ess < 6000

    def test_identical_draws_flagged_degenerate(self):
        out = mh.diagnostics(self.make_injected_chain(np.full(100, 3.25)))
        coord = out["coordinates"]["x"]
        assert coord["degenerate"] is True
        assert coord["ess"] == 1.0
        assert coord["q50"] == 3.25

    def test_all_rejected_chain_zero_acceptance(self):
        family = stub_family(lambda t: 0.0, support=((0.0, 1.0),),
                             sd=1000.0)
        config = mh.ChainConfig(burnin=0, total=50, thin=1, start=(0.5,))
        out = mh.run_chain(family, config, seed=13)
        if out.acceptance_count == 0:
            stats = mh.diagnostics(out)
            assert stats["acceptance_rate"] == 0.0

    def test_quantiles_and_autocorr_shape(self):
        rng = np.random.default_rng(8)
        out = mh.diagnostics(self.make_injected_chain(
            rng.normal(size=2000)))
        coord = out["coordinates"]["x"]
        assert coord["q025"] < coord["q50"] < coord["q975"]
        assert len(coord["autocorr"]) == 50

    def test_empty_chain_raises(self):
        config = mh.ChainConfig(burnin=0, total=10, thin=1, start=(0.0,))
        empty = mh.Chain(names=["x"], kept=[], acceptance_count=0,
                         config=config, seed=0, trace=[])
        with pytest.raises(EmptyChain):
            mh.diagnostics(empty)


class TestChainCsv:
    def test_round_trip_columns(self, tmp_path):
        family = stub_family(lambda t: -0.5 * float(t[0]) ** 2)
        config = mh.ChainConfig(burnin=5, total=50, thin=1, start=(0.0,))
        out = mh.run_chain(family, config, seed=2)
        path = tmp_path / "chain.csv"
        mh.write_chain_csv(out, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "iteration,theta,log_ml,accepted"
        assert len(lines) == 51
        first = lines[1].split(",")
        assert first[0] == "1"
        assert first[3] in {"0", "1"}
