"""Sampler blocks against closed-form conditionals, prior-recovery checks,
determinism, checkpoint resume, and convergence diagnostics."""

import numpy as np
import pytest
from scipy import stats

from forestsae import _kernels
from forestsae.model import (EdaSummary, SubmodelSpec, default_priors)
from forestsae.sampler import (ChainSamples, McmcConfig, StageData,
                               extend_chain, gelman_rubin,
                               gibbs_regression_block, gibbs_variance_block,
                               loglik_at_posterior_mean, metropolis_phi,
                               run_chain, update_w_sequential)
from forestsae.spatial import CovParams, build_neighbor_graph, dense_covariance


def make_data(rng, n=80, q=3, phi_scale=50.0):
    coords = rng.uniform(0, phi_scale, (n, 2))
    strata = rng.integers(0, q, n)
    x = rng.uniform(0, 15, n)
    y = 20.0 + 5.0 * x + rng.normal(0, 4.0, n)
    return StageData(z=y, covariates=x[:, None], strata=strata,
                     coords=coords, q=q)


def small_priors(q=3, residual=16.0):
    return default_priors(EdaSummary(residual_variance=residual), q=q)


class TestMcmcConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            McmcConfig(n_iter=10, n_burn=10)
        with pytest.raises(ValueError):
            McmcConfig(thin=0)
        with pytest.raises(ValueError):
            McmcConfig(n_chains=0)

    def test_reported_run_shape(self):
        # 25000 iterations with 1000 retained per chain across 3 chains
        cfg = McmcConfig(n_iter=25000, n_burn=15000, thin=10, n_chains=3)
        assert cfg.retained_per_chain == 1000
        assert cfg.retained_per_chain * cfg.n_chains == 3000

    def test_minimal_retention(self):
        cfg = McmcConfig(n_iter=101, n_burn=100, thin=1, n_chains=4)
        assert cfg.retained_per_chain == 1


class TestVarianceBlock:
    def test_ig_mean_identity(self):
        # shape 2, scale 1, n = 2, SS = 2 -> IG(3, 2) with mean 1
        rng = np.random.default_rng(0)
        draws = np.array([gibbs_variance_block(rng, 2.0, 1.0, 2.0, 2.0)
                          for _ in range(200_000)])
        assert draws.mean() == pytest.approx(1.0, abs=0.02)

    def test_prior_fallback_for_empty_stratum(self):
        rng = np.random.default_rng(1)
        draws = np.array([gibbs_variance_block(rng, 2.0, 3.0, 0.0, 0.0)
                          for _ in range(4000)])
        ks = stats.kstest(draws, stats.invgamma(2.0, scale=3.0).cdf)
        assert ks.statistic < 0.05

    def test_zero_residuals_concentrate_below_prior_mean(self):
        rng = np.random.default_rng(2)
        scale = 5.0
        draws = gibbs_variance_block(rng, 2.0, np.full(1000, scale),
                                     np.full(1000, 40.0), np.zeros(1000))
        # IG(22, 5) has mean 5/21, far below the prior mean of 5
        assert draws.mean() < scale / 4

    def test_vectorized_per_stratum(self):
        rng = np.random.default_rng(3)
        out = gibbs_variance_block(rng, 2.0, np.array([1.0, 2.0]),
                                   np.array([10.0, 0.0]),
                                   np.array([5.0, 0.0]))
        assert out.shape == (2,)
        assert np.all(out > 0)


class TestRegressionBlock:
    def test_intercept_only_closed_form(self):
        # flat prior, known sigma2: posterior N(mean(y - w), sigma2/n)
        rng = np.random.default_rng(4)
        n, sigma2 = 50, 4.0
        y = rng.normal(10, 2, n)
        w = rng.normal(0, 1, n)
        D = np.ones((n, 1))
        noise_prec = np.full(n, 1.0 / sigma2)
        draws = np.array([
            gibbs_regression_block(rng, D, np.zeros(1), y - w, noise_prec)[0]
            for _ in range(4000)])
        target = stats.norm(np.mean(y - w), np.sqrt(sigma2 / n))
        assert stats.kstest(draws, target.cdf).statistic < 0.05

    def test_degenerate_prior_pins_to_zero(self):
        rng = np.random.default_rng(5)
        n = 30
        y = rng.normal(5, 1, n)
        D = np.hstack([np.ones((n, 1)), rng.normal(0, 1, (n, 1))])
        prior_prec = np.array([0.0, 1e12])  # slope variance -> 0
        draws = np.array([
            gibbs_regression_block(rng, D, prior_prec, y, np.ones(n))[1]
            for _ in range(200)])
        assert np.abs(draws).max() < 1e-4

    def test_collinear_design_without_prior_raises(self):
        rng = np.random.default_rng(6)
        n = 20
        col = rng.normal(0, 1, (n, 1))
        D = np.hstack([col, col])
        with pytest.raises(ValueError, match="singular"):
            gibbs_regression_block(rng, D, np.zeros(2), rng.normal(0, 1, n),
                                   np.ones(n))


class TestLatentSweep:
    def test_single_node_exact_posterior(self):
        # one latent effect: conditional N(v * resid / tau2, v),
        # v = (1/sigma2 + 1/tau2)^-1
        rng = np.random.default_rng(7)
        sigma2, tau2, resid = 2.0, 0.5, 3.0
        graph = build_neighbor_graph(np.array([[0.0, 0.0]]), m=1,
                                     ordering="given")
        a, r = _kernels.unit_nngp_factors(graph.coords, graph.nbr_idx,
                                          graph.nbr_cnt, 0.5)
        w = np.zeros(1)
        draws = []
        for _ in range(6000):
            update_w_sequential(rng, w, np.array([resid]),
                                np.array([1.0 / tau2]), graph, a, r, sigma2)
            draws.append(w[0])
        v = 1.0 / (1.0 / sigma2 + 1.0 / tau2)
        target = stats.norm(v * resid / tau2, np.sqrt(v))
        assert stats.kstest(draws, target.cdf).statistic < 0.05

    def test_no_data_samples_the_prior(self):
        # noise precision zero: stationary law is the process prior, so the
        # sample covariance over a long run matches the dense covariance
        rng = np.random.default_rng(8)
        n, params = 5, CovParams(2.0, 0.4)
        coords = rng.uniform(0, 4, (n, 2))
        graph = build_neighbor_graph(coords, m=n - 1)
        a, r = _kernels.unit_nngp_factors(graph.coords, graph.nbr_idx,
                                          graph.nbr_cnt, params.phi)
        K = dense_covariance(graph.coords, params)
        w = np.zeros(n)
        draws = []
        for it in range(40000):
            update_w_sequential(rng, w, np.zeros(n), np.zeros(n), graph, a, r,
                                params.sigma2)
            if it % 4 == 0:
                draws.append(w.copy())
        emp = np.cov(np.asarray(draws).T)
        assert np.abs(emp - K).max() < 0.15 * params.sigma2

    def test_tiny_process_variance_pins_to_zero(self):
        rng = np.random.default_rng(9)
        n = 10
        coords = rng.uniform(0, 5, (n, 2))
        graph = build_neighbor_graph(coords, m=4)
        a, r = _kernels.unit_nngp_factors(graph.coords, graph.nbr_idx,
                                          graph.nbr_cnt, 0.5)
        w = np.zeros(n)
        update_w_sequential(rng, w, np.full(n, 50.0), np.ones(n), graph, a, r,
                            1e-12)
        assert np.abs(w).max() < 1e-4


class TestMetropolisPhi:
    def _setup(self, n=12, seed=10):
        rng = np.random.default_rng(seed)
        coords = rng.uniform(0, 30, (n, 2))
        graph = build_neighbor_graph(coords, m=min(6, n - 1))
        priors = small_priors()
        phi = 0.3
        a, r = _kernels.unit_nngp_factors(graph.coords, graph.nbr_idx,
                                          graph.nbr_cnt, phi)
        w = rng.normal(0, 1, n)
        return rng, graph, priors, phi, a, r, w

    def test_zero_step_constant_and_accepted(self):
        rng, graph, priors, phi, a, r, w = self._setup()
        accepted = 0
        for _ in range(50):
            phi, a, r, acc = metropolis_phi(rng, w, 1.0, phi, a, r, graph,
                                            priors, step=0.0)
            accepted += int(acc)
        assert accepted == 50
        assert phi == pytest.approx(0.3, rel=1e-12)

    def test_flat_likelihood_recovers_uniform_prior(self):
        # a single node has no neighbors, so the latent density carries no
        # information about the decay: the chain must sample its prior
        rng = np.random.default_rng(11)
        graph = build_neighbor_graph(np.array([[0.0, 0.0]]), m=1,
                                     ordering="given")
        priors = small_priors()
        a, r = _kernels.unit_nngp_factors(graph.coords, graph.nbr_idx,
                                          graph.nbr_cnt, 0.3)
        w = np.array([0.4])
        phi, draws = 0.3, []
        for it in range(40000):
            phi, a, r, _ = metropolis_phi(rng, w, 1.0, phi, a, r, graph,
                                          priors, step=1.2)
            if it % 4 == 0:
                draws.append(phi)
        ks = stats.kstest(draws, stats.uniform(
            priors.phi_lower, priors.phi_upper - priors.phi_lower).cdf)
        assert ks.statistic < 0.05

    def test_out_of_support_rejected(self):
        rng, graph, priors, phi, a, r, w = self._setup()
        phi0 = priors.phi_upper * 0.999
        out = metropolis_phi(np.random.default_rng(0), w, 1.0, phi0, a, r,
                             graph, priors, step=50.0)
        assert out[0] in (phi0,) or priors.phi_lower <= out[0] <= priors.phi_upper


class TestRunChain:
    def test_retained_counts(self):
        rng = np.random.default_rng(12)
        data = make_data(rng, n=40)
        cfg = McmcConfig(n_iter=61, n_burn=60, thin=1, n_chains=3, rng_seed=1)
        cs = run_chain(SubmodelSpec("SM2"), data, small_priors(), cfg)
        assert cs.L == 3
        assert cs.chain_length == 1

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(13)
        data = make_data(rng, n=50)
        cfg = McmcConfig(n_iter=300, n_burn=100, thin=2, n_chains=2,
                         rng_seed=99)
        a = run_chain(SubmodelSpec("FULL"), data, small_priors(), cfg, m=6)
        b = run_chain(SubmodelSpec("FULL"), data, small_priors(), cfg, m=6)
        for k in a.names():
            np.testing.assert_array_equal(a.params[k], b.params[k])
        np.testing.assert_array_equal(a.loglik, b.loglik)

    def test_different_seeds_differ(self):
        rng = np.random.default_rng(14)
        data = make_data(rng, n=50)
        base = dict(n_iter=200, n_burn=100, thin=2, n_chains=1)
        a = run_chain(SubmodelSpec("SM1"), data, small_priors(),
                      McmcConfig(rng_seed=1, **base))
        b = run_chain(SubmodelSpec("SM1"), data, small_priors(),
                      McmcConfig(rng_seed=2, **base))
        assert not np.array_equal(a.params["beta0"], b.params["beta0"])

    def test_sm1_equals_sm2_when_single_stratum(self):
        # with one stratum the pooled and per-stratum variances coincide, so
        # the two submodels target the same posterior
        rng = np.random.default_rng(15)
        data = make_data(rng, n=60, q=1)
        cfg = McmcConfig(n_iter=4200, n_burn=200, thin=2, n_chains=1,
                         rng_seed=5)
        a = run_chain(SubmodelSpec("SM1"), data, small_priors(q=1), cfg)
        b = run_chain(SubmodelSpec("SM2"), data, small_priors(q=1), cfg)
        ks_tau = stats.ks_2samp(a.params["tau2"][:, 0], b.params["tau2"][:, 0])
        ks_beta = stats.ks_2samp(a.params["beta"][:, 0], b.params["beta"][:, 0])
        assert ks_tau.statistic < 0.06
        assert ks_beta.statistic < 0.06

    def test_covariate_flavor_names(self):
        rng = np.random.default_rng(16)
        data = make_data(rng, n=40)
        cfg = McmcConfig(n_iter=80, n_burn=40, thin=2, n_chains=1, rng_seed=3)
        cs = run_chain(SubmodelSpec("FULL"), data, small_priors(), cfg,
                       flavor="covariate", m=5)
        assert set(cs.names()) == {"alpha0", "alpha_tilde0", "alpha",
                                   "alpha_tilde", "nu2", "gamma2", "u",
                                   "nu2_u", "phi_u"}
        state = cs.state(0)
        assert state.alpha_tilde0.shape == (3,)
        assert state.theta_u.sigma2 > 0

    def test_checkpoint_roundtrip_and_resume(self, tmp_path):
        rng = np.random.default_rng(17)
        data = make_data(rng, n=40)
        pri = small_priors()
        long_cfg = McmcConfig(n_iter=400, n_burn=100, thin=3, n_chains=1,
                              rng_seed=7)
        short_cfg = McmcConfig(n_iter=250, n_burn=100, thin=3, n_chains=1,
                               rng_seed=7)
        full = run_chain(SubmodelSpec("FULL"), data, pri, long_cfg, m=5)
        short = run_chain(SubmodelSpec("FULL"), data, pri, short_cfg, m=5)
        path = tmp_path / "chain.pkl"
        short.save(path)
        resumed = extend_chain(ChainSamples.load(path), data, n_extra=150)
        assert resumed.L == full.L
        for k in full.names():
            np.testing.assert_array_equal(resumed.params[k], full.params[k])

    def test_divergence_abort_mentions_iteration(self):
        rng = np.random.default_rng(18)
        data = make_data(rng, n=30)
        # alternating astronomical values overflow the residual sum of squares
        data.z[:] = np.where(np.arange(30) % 2 == 0, 1e160, -1e160)
        cfg = McmcConfig(n_iter=20, n_burn=10, thin=1, n_chains=1, rng_seed=1)
        with pytest.raises(RuntimeError, match="iteration"):
            run_chain(SubmodelSpec("SM1"), data, small_priors(), cfg)

    def test_loglik_at_posterior_mean_degenerate(self):
        rng = np.random.default_rng(19)
        data = make_data(rng, n=30)
        cfg = McmcConfig(n_iter=40, n_burn=20, thin=1, n_chains=1, rng_seed=2)
        cs = run_chain(SubmodelSpec("SM2"), data, small_priors(), cfg)
        ll = loglik_at_posterior_mean(cs, data)
        assert ll.shape == (30,)
        assert np.all(np.isfinite(ll))


class TestGelmanRubin:
    def _fake_chain(self, cols, n_chains):
        L = cols["x"].shape[0]
        cs = ChainSamples(
            flavor="outcome", model=SubmodelSpec("SM1"),
            config=McmcConfig(n_iter=2, n_burn=1, thin=1, n_chains=n_chains,
                              rng_seed=0),
            priors=small_priors(), q=1, p=1, n=2, params=cols,
            loglik=np.zeros((L, 2)), fitted=np.zeros((L, 2)),
            acceptance=np.full(n_chains, np.nan),
            final_states=[{}] * n_chains)
        return cs

    def test_constant_chains_report_one_with_flag(self):
        cs = self._fake_chain({"x": np.full(40, 2.5)}, n_chains=2)
        out = gelman_rubin(cs)
        assert out["x"] == 1.0
        assert "x" in out["_degenerate"]

    def test_same_distribution_near_one(self):
        rng = np.random.default_rng(20)
        cs = self._fake_chain({"x": rng.normal(0, 1, 4000)}, n_chains=2)
        assert gelman_rubin(cs)["x"] < 1.01

    def test_separated_chains_flag_large(self):
        rng = np.random.default_rng(21)
        x = np.concatenate([rng.normal(0, 1, 500), rng.normal(10, 1, 500)])
        cs = self._fake_chain({"x": x}, n_chains=2)
        assert gelman_rubin(cs)["x"] > 1.1

    def test_single_chain_error(self):
        cs = self._fake_chain({"x": np.zeros(10)}, n_chains=1)
        with pytest.raises(ValueError, match="within-chain"):
            gelman_rubin(cs)


class TestAdaptation:
    def test_acceptance_steered_into_band(self):
        rng = np.random.default_rng(22)
        data = make_data(rng, n=60)
        cfg = McmcConfig(n_iter=3000, n_burn=2000, thin=2, n_chains=1,
                         rng_seed=11, metropolis_step=3.0, adapt=True)
        cs = run_chain(SubmodelSpec("FULL"), data, small_priors(), cfg, m=5)
        assert 0.25 <= cs.acceptance[0] <= 0.50
