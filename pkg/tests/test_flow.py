"""Integrator accuracy, divergence-mode agreement, priors, and sampling."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from nbflow import flow
from nbflow import network as net


def linear_rate(A):
    """Rate function of the linear field b(x) = x A^T per particle row."""
    def rate(x, t):
        B, n, d = x.shape
        vel = x.reshape(B, n * d) @ A.T
        div = np.full(B, np.trace(A))
        return vel.reshape(B, n, d), div
    return rate


def contraction_rate(x, t):
    B = x.shape[0]
    return -x, np.full(B, -x.shape[1] * x.shape[2])


def zero_rate(x, t):
    return np.zeros_like(x), np.zeros(x.shape[0])


class TestRk4:
    def test_scalar_contraction_reaches_exp_minus_one(self):
        x0 = np.array([[[1.0]]])
        state = flow.rk4_integrate(contraction_rate, x0, steps=20)
        assert abs(state.x[0, 0, 0] - np.exp(-1.0)) < 1e-6

    def test_zero_field_is_identity(self):
        x0 = np.random.default_rng(0).standard_normal((3, 4, 2))
        state = flow.rk4_integrate(zero_rate, x0, steps=20)
        np.testing.assert_array_equal(state.x, x0)
        np.testing.assert_array_equal(state.delta_logrho, np.zeros(3))

    def test_contraction_log_density_change_is_dn(self):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((5, 4, 3))
        state = flow.rk4_integrate(contraction_rate, x0, steps=20)
        np.testing.assert_allclose(state.delta_logrho, np.full(5, 12.0),
                                   atol=1e-9)
        np.testing.assert_allclose(state.x, np.exp(-1.0) * x0, atol=1e-6)

    def test_forward_then_reverse_roundtrip(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((6, 6))
        A = 0.6 * A / np.linalg.norm(A, 2)
        rate = linear_rate(A)
        x0 = rng.standard_normal((4, 3, 2))
        fwd = flow.rk4_integrate(rate, x0, steps=20, direction="forward")
        back = flow.rk4_integrate(rate, fwd.x, steps=20, direction="reverse")
        assert np.abs(back.x - x0).max() < 1e-8
        assert np.abs(fwd.delta_logrho + back.delta_logrho).max() < 1e-8

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            flow.rk4_integrate(zero_rate, np.zeros((1, 2, 2)), steps=0)
        with pytest.raises(ValueError):
            flow.rk4_integrate(zero_rate, np.zeros((1, 2, 2)), steps=5,
                               direction="sideways")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_state_reports_step(self):
        def blowup(x, t):
            return x * 1e200, np.zeros(x.shape[0])
        with pytest.raises(FloatingPointError, match="step"):
            flow.rk4_integrate(blowup, np.ones((1, 2, 2)), steps=10)

    def test_trajectory_capture(self):
        x0 = np.ones((2, 2, 2))
        state = flow.rk4_integrate(contraction_rate, x0, steps=5,
                                   keep_trajectory=True)
        assert state.trajectory.shape == (6, 2, 2, 2)
        np.testing.assert_array_equal(state.trajectory[0], x0)


class TestGaussianPrior:
    def test_full_log_density_matches_scipy(self):
        prior = flow.GaussianPrior(n=4, d=2)
        rng = np.random.default_rng(3)
        x = prior.sample(rng, 10)
        ours = prior.log_density(x)
        ref = multivariate_normal(mean=np.zeros(8)).logpdf(x.reshape(10, 8))
        np.testing.assert_allclose(ours, ref, atol=1e-10)

    def test_mean_free_samples_are_centered(self):
        prior = flow.GaussianPrior(n=5, d=3, mean_free=True)
        x = prior.sample(np.random.default_rng(4), 7)
        np.testing.assert_allclose(x.mean(axis=1), 0.0, atol=1e-14)

    def test_mean_free_density_matches_subspace_gaussian(self):
        # build an orthonormal basis of the zero-mean subspace per dimension
        n, d = 5, 2
        prior = flow.GaussianPrior(n=n, d=d, mean_free=True)
        rng = np.random.default_rng(5)
        x = prior.sample(rng, 6)
        ones = np.ones((n, 1)) / np.sqrt(n)
        Q, _ = np.linalg.qr(np.eye(n) - ones @ ones.T)
        Q = Q[:, :n - 1]  # columns span the subspace
        coords = np.einsum("bnd,nm->bmd", x, Q).reshape(6, (n - 1) * d)
        ref = multivariate_normal(mean=np.zeros((n - 1) * d)).logpdf(coords)
        np.testing.assert_allclose(prior.log_density(x), ref, atol=1e-10)


class TestDivergenceModes:
    def setup_method(self):
        self.cfg = net.ArchConfig(n_hidden=6, steps=2, knn_k=3).validate()
        self.params = net.init_params(self.cfg, seed=0)
        self.x = np.random.default_rng(6).standard_normal((6, 2))

    def test_hollow_equals_brute(self):
        dh = flow.divergence(self.params, self.cfg, self.x, t=0.3, mode="hollow")
        db = flow.divergence(self.params, self.cfg, self.x, t=0.3, mode="brute")
        assert abs(dh - db) <= 1e-10

    def test_hollow_matches_fd(self):
        dh = flow.divergence(self.params, self.cfg, self.x, t=0.3, mode="hollow")
        df = flow.divergence(self.params, self.cfg, self.x, t=0.3, mode="fd")
        assert abs(dh - df) <= 1e-4

    def test_pass_counters(self):
        info = {}
        flow.divergence(self.params, self.cfg, self.x, mode="hollow", info=info)
        assert info["reverse_passes"] == 2
        flow.divergence(self.params, self.cfg, self.x, mode="brute", info=info)
        assert info["reverse_passes"] == 12

    def test_batched_agreement(self):
        xb = np.random.default_rng(7).standard_normal((5, 6, 2))
        dh = flow.divergence(self.params, self.cfg, xb, t=0.1, mode="hollow")
        db = flow.divergence(self.params, self.cfg, xb, t=0.1, mode="brute")
        np.testing.assert_allclose(dh, db, atol=1e-10)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            flow.divergence(self.params, self.cfg, self.x, mode="hutchinson")


class TestSampleWithLikelihood:
    def test_zero_field_keeps_prior_density(self):
        cfg = net.ArchConfig(n_hidden=4, steps=1, knn_k=2).validate()
        params = net.zero_params(cfg)
        prior = flow.GaussianPrior(n=4, d=2)
        run = flow.sample_with_likelihood(params, cfg, prior, count=16,
                                          steps=5, seed=1)
        np.testing.assert_array_equal(run.logrho1, run.logrho0)
        np.testing.assert_array_equal(run.delta_logrho, np.zeros(16))

    def test_hollow_and_brute_identical_on_same_seed(self):
        cfg = net.ArchConfig(n_hidden=5, steps=2, knn_k=2).validate()
        params = net.init_params(cfg, seed=2)
        prior = flow.GaussianPrior(n=4, d=2)
        rh = flow.sample_with_likelihood(params, cfg, prior, count=8,
                                         mode="hollow", steps=8, seed=3)
        rb = flow.sample_with_likelihood(params, cfg, prior, count=8,
                                         mode="brute", steps=8, seed=3)
        np.testing.assert_array_equal(rh.x, rb.x)
        assert np.abs(rh.logrho1 - rb.logrho1).max() <= 1e-9

    def test_pass_accounting(self):
        cfg = net.ArchConfig(n_hidden=4, steps=1, knn_k=2).validate()
        params = net.init_params(cfg, seed=4)
        prior = flow.GaussianPrior(n=3, d=2)
        run = flow.sample_with_likelihood(params, cfg, prior, count=4,
                                          mode="hollow", steps=5, seed=5)
        # 5 steps x 4 stages x d probe passes, one union batch
        assert run.reverse_passes == 5 * 4 * 2
        assert run.rt >= run.rt_forward + run.rt_divergence - 0.05 * run.rt

    def test_rotation_invariant_density_with_pairwise_field(self):
        cfg = net.ArchConfig(n_hidden=5, steps=2, knn_k=3,
                             pairwise_diff=True).validate()
        params = net.init_params(cfg, seed=6)
        prior = flow.GaussianPrior(n=5, d=2, mean_free=True)
        rng = np.random.default_rng(8)
        x0 = prior.sample(rng, 3)
        theta = 0.7
        R = np.array([[np.cos(theta), -np.sin(theta)],
                      [np.sin(theta), np.cos(theta)]])

        def logrho1_of(x_start):
            mf = flow.ModelField(params, cfg, mode="hollow")
            state = flow.rk4_integrate(mf.rate, x_start, steps=10)
            return prior.log_density(x_start) + state.delta_logrho

        base = logrho1_of(x0)
        rot = logrho1_of(x0 @ R.T)
        np.testing.assert_allclose(rot, base, atol=1e-6)

    def test_mean_free_projection_of_outputs(self):
        cfg = net.ArchConfig(n_hidden=5, steps=1, knn_k=2,
                             pairwise_diff=True).validate()
        params = net.init_params(cfg, seed=7)
        prior = flow.GaussianPrior(n=4, d=2, mean_free=True)
        run = flow.sample_with_likelihood(params, cfg, prior, count=6,
                                          steps=5, seed=9)
        np.testing.assert_allclose(run.x.mean(axis=1), 0.0, atol=1e-12)


class TestModelFieldGuards:
    def test_hollow_rejected_on_baseline(self):
        cfg = net.ArchConfig(n_hidden=4, steps=1, baseline=True).validate()
        params = net.init_params(cfg, seed=0)
        with pytest.raises(ValueError):
            flow.ModelField(params, cfg, mode="hollow")

    def test_brute_allowed_on_baseline(self):
        cfg = net.ArchConfig(n_hidden=4, steps=1, baseline=True).validate()
        params = net.init_params(cfg, seed=0)
        mf = flow.ModelField(params, cfg, mode="brute")
        x = np.random.default_rng(1).standard_normal((2, 3, 2))
        vel, div = mf.rate(x, 0.5)
        assert vel.shape == (2, 3, 2)
        assert div.shape == (2,)
        assert mf.reverse_passes == 6
