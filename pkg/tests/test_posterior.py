import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpbayes.derivop import build_deriv_operator
from tpbayes.design import BandedSymMatrix, build_design
from tpbayes.errors import NoiseModeError, OverParameterizationError, ParameterError
from tpbayes.posterior import (
    EmpiricalBayes,
    FitPlan,
    FixedSigma,
    HierarchicalIG,
    PosteriorState,
    PriorSpec,
    SigmaPosterior,
    fit,
    posterior_cov_deriv,
    posterior_mean_deriv,
    sample_function,
    sigma_posterior,
)
from tpbayes.simulate import SeriesFunction, gen_data, make_design, stream
from tpbayes.splinebasis import BasisSpec, tensor_basis


def dense_quantities(spec, X, Y, eta=0.0):
    B = tensor_basis(spec, X).to_dense()
    eta = np.full(spec.size, eta) if np.ndim(eta) == 0 else eta
    P = B.T @ B + np.eye(spec.size)
    theta = np.linalg.solve(P, B.T @ Y + eta)
    resid = Y - B @ eta
    s2 = resid @ np.linalg.solve(B @ B.T + np.eye(len(Y)), resid) / len(Y)
    return B, P, theta, s2


@pytest.fixture(scope="module")
def toy():
    spec = BasisSpec.uniform(4, 5)
    X = make_design(80)
    Y = np.sin(4 * X[:, 0]) + 0.1 * stream(0, "toy").standard_normal(80)
    return spec, X, Y, fit(spec, PriorSpec.standard(spec), X, Y)


class TestPrior:
    def test_defaults(self):
        spec = BasisSpec.uniform(3, 2)
        p = PriorSpec(spec)
        np.testing.assert_array_equal(p.eta, np.zeros(5))
        assert isinstance(p.noise, EmpiricalBayes)

    def test_rejects_not_pd(self):
        spec = BasisSpec.uniform(3, 2)
        with pytest.raises(ParameterError):
            PriorSpec(spec, omega_inv=BandedSymMatrix.zeros(spec.J))

    def test_improper_allowed_explicitly(self):
        spec = BasisSpec.uniform(3, 2)
        PriorSpec(spec, omega_inv=BandedSymMatrix.zeros(spec.J), allow_improper=True)

    @pytest.mark.parametrize("beta1, beta2", [(4.0, 1.0), (6.0, 0.0)])
    def test_hierarchical_bounds(self, beta1, beta2):
        with pytest.raises(ParameterError):
            HierarchicalIG(beta1, beta2)

    def test_fixed_sigma_positive(self):
        with pytest.raises(ParameterError):
            FixedSigma(0.0)


class TestFit:
    def test_exact_data(self):
        spec = BasisSpec.uniform(3, 4)
        X = make_design(40)
        eta = np.random.default_rng(1).standard_normal(spec.size)
        Y = tensor_basis(spec, X).matvec(eta)
        state = fit(spec, PriorSpec(spec, eta), X, Y)
        assert state.sigma_hat_sq == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(state.theta_hat, eta, atol=1e-10)

    def test_matches_dense(self, toy):
        spec, X, Y, state = toy
        _, _, theta, s2 = dense_quantities(spec, X, Y)
        np.testing.assert_allclose(state.theta_hat, theta, rtol=1e-10)
        assert state.sigma_hat_sq == pytest.approx(s2, rel=1e-8)

    def test_near_flat_prior_is_least_squares(self):
        spec = BasisSpec.uniform(4, 4)
        X = make_design(60)
        Y = np.cos(3 * X[:, 0])
        prior = PriorSpec(spec, 0.0, BandedSymMatrix.identity(spec.J, 1e-10))
        state = fit(spec, prior, X, Y)
        B = tensor_basis(spec, X).to_dense()
        want = np.linalg.solve(B.T @ B + 1e-10 * np.eye(spec.size), B.T @ Y)
        np.testing.assert_allclose(state.theta_hat, want, atol=1e-7)

    @pytest.mark.parametrize("n", [50, 300])
    def test_sigma_identity_vs_dense(self, n):
        spec = BasisSpec.uniform(4, 8)
        X = make_design(n)
        Y = gen_data(SeriesFunction(2000), X, 0.1, rng=stream(n, "s"))
        state = fit(spec, PriorSpec(spec, 0.3), X, Y)
        *_, s2 = dense_quantities(spec, X, Y, 0.3)
        assert state.sigma_hat_sq == pytest.approx(s2, rel=1e-8)

    def test_two_dimensional(self):
        spec = BasisSpec.uniform((3, 3), (2, 3))
        X = make_design(144, 2)
        Y = X[:, 0] * X[:, 1] + 0.05 * stream(5, "xy").standard_normal(144)
        state = fit(spec, PriorSpec.standard(spec), X, Y)
        _, _, theta, s2 = dense_quantities(spec, X, Y)
        np.testing.assert_allclose(state.theta_hat, theta, rtol=1e-10)
        assert state.sigma_hat_sq == pytest.approx(s2, rel=1e-8)

    def test_over_parameterized(self):
        spec = BasisSpec.uniform(4, 10)
        with pytest.raises(OverParameterizationError):
            fit(spec, PriorSpec.standard(spec), make_design(8), np.zeros(8))

    def test_sigma_penalized_residual_form(self, toy):
        # n sigma_hat^2 = ||Y - B theta_hat||^2 + (theta_hat - eta)^T Omega^{-1} (theta_hat - eta)
        spec, X, Y, state = toy
        B = tensor_basis(spec, X).to_dense()
        resid = Y - B @ state.theta_hat
        want = (resid @ resid + state.theta_hat @ state.theta_hat) / len(Y)
        assert state.sigma_hat_sq == pytest.approx(want, rel=1e-10)

    def test_sigma_across_seeds(self):
        # the prior term ||theta_hat||^2 / n biases sigma_hat^2 upward by roughly 0.02 at n=500
        spec = BasisSpec.uniform(4, 10)
        plan = FitPlan(spec, PriorSpec.standard(spec), make_design(500))
        f = SeriesFunction()(plan.X)
        s2 = [plan.fit(gen_data(None, plan.X, 0.1, rng=stream(7, seed, "y"), f_values=f)).sigma_hat_sq
              for seed in range(100)]
        assert 0.08 <= min(s2) and max(s2) <= 0.16
        assert np.mean(s2) == pytest.approx(0.1, abs=0.03)

    def test_leverage_dense(self, toy):
        spec, X, _, _ = toy
        plan = FitPlan(spec, PriorSpec.standard(spec), X)
        B = tensor_basis(spec, X).to_dense()
        H = B @ np.linalg.solve(B.T @ B + np.eye(spec.size), B.T)
        np.testing.assert_allclose(plan.leverage(), np.diag(H), rtol=1e-10)


class TestSigmaPosterior:
    def test_prior_only(self):
        post = SigmaPosterior.from_data(6.0, 2.0, 0, 0.0)
        assert (post.shape, post.rate, post.mean) == (3.0, 1.0, 0.5)

    def test_closed_form(self):
        post = SigmaPosterior.from_data(6.0, 2.0, 100, 0.1)
        assert post.shape == pytest.approx(53.0)
        assert post.rate == pytest.approx(6.0)
        assert post.mean == pytest.approx(6 / 52)
        assert post.variance == pytest.approx(36 / (52**2 * 51))

    def test_draw_moments(self):
        post = SigmaPosterior.from_data(6.0, 2.0, 100, 0.1)
        draws = post.draw_sigma_sq(np.random.default_rng(0), 100_000)
        se = np.sqrt(post.variance / draws.size)
        assert abs(draws.mean() - post.mean) < 3 * se

    def test_wrong_mode(self, toy):
        with pytest.raises(NoiseModeError):
            sigma_posterior(toy[3])

    def test_from_state(self):
        spec = BasisSpec.uniform(3, 3)
        X = make_design(30)
        state = fit(spec, PriorSpec(spec, noise=HierarchicalIG(6.0, 2.0)), X, np.sin(X[:, 0]))
        post = sigma_posterior(state)
        assert post.shape == 18.0
        assert post.rate == pytest.approx((2.0 + 30 * state.sigma_hat_sq) / 2)


class TestMeanAndCovariance:
    def test_zero_data_zero_prior(self):
        spec = BasisSpec.uniform(4, 3)
        X = make_design(20)
        state = fit(spec, PriorSpec.standard(spec), X, np.zeros(20))
        for r in (0, 1, 2):
            assert np.all(posterior_mean_deriv(state, r, np.linspace(0, 1, 9)[:, None]) == 0.0)

    def test_two_routes(self, toy):
        spec, X, Y, state = toy
        B, P, _, _ = dense_quantities(spec, X, Y)
        x = np.linspace(0, 1, 13)[:, None]
        for r in (0, 1, 2):
            W = build_deriv_operator(spec, r).to_dense()
            low = tensor_basis(spec, x, r).to_dense()
            A = low @ W @ np.linalg.solve(P, B.T)
            c = low @ W @ np.linalg.solve(P, np.eye(spec.size))
            want = A @ Y + c @ np.zeros(spec.size)
            np.testing.assert_allclose(posterior_mean_deriv(state, r, x), want, rtol=1e-10, atol=1e-10)

    def test_interpolation_limit(self):
        spec = BasisSpec.uniform(4, 8)
        X = make_design(2000)
        f = np.sin(2 * np.pi * X[:, 0])
        Y = f + 1e-4 * stream(3, "y").standard_normal(2000)
        state = fit(spec, PriorSpec.standard(spec), X, Y)
        assert abs(posterior_mean_deriv(state, 0, 0.25) - 1.0) < 5e-3

    def test_prior_covariance_without_data(self):
        spec = BasisSpec.uniform(3, 4)
        state = fit(spec, PriorSpec.standard(spec), np.zeros((0, 1)), np.zeros(0), allow_overparameterized=True)
        x = 0.37
        b = tensor_basis(spec, [[x]]).to_dense()[0]
        assert posterior_cov_deriv(state, 0, x, x) == pytest.approx(b @ b, rel=1e-12)
        assert state.sigma_hat_sq == 0.0

    def test_dense_kernel(self, toy):
        spec, X, Y, state = toy
        _, P, _, _ = dense_quantities(spec, X, Y)
        Pinv = np.linalg.inv(P)
        pts = np.array([[0.1], [0.45], [0.8]])
        for r in (0, 1):
            W = build_deriv_operator(spec, r).to_dense()
            G = tensor_basis(spec, pts, r).to_dense() @ W
            np.testing.assert_allclose(state.covariance(r, pts), G @ Pinv @ G.T, rtol=1e-10, atol=1e-14)
            assert posterior_cov_deriv(state, r, 0.1, 0.8) == pytest.approx((G @ Pinv @ G.T)[0, 2], rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(x=st.floats(0, 1), y=st.floats(0, 1), r=st.integers(0, 2))
    def test_cauchy_schwarz(self, toy, x, y, r):
        state = toy[3]
        vx = posterior_cov_deriv(state, r, x, x)
        vy = posterior_cov_deriv(state, r, y, y)
        assert vx >= 0 and vy >= 0
        assert abs(posterior_cov_deriv(state, r, x, y)) <= np.sqrt(vx * vy) * (1 + 1e-12) + 1e-300


class TestSampling:
    def test_zero_sigma_is_mean(self, toy):
        state = toy[3]
        grid = np.linspace(0, 1, 17)[:, None]
        np.testing.assert_allclose(sample_function(state, 0, 0.0, grid, np.random.default_rng(0)), state.mean(0, grid))

    def test_draw_moments(self, toy):
        state = toy[3]
        pts = np.array([[0.2], [0.3]])
        sigma = 0.5
        draws = sample_function(state, 1, sigma, pts, np.random.default_rng(1), size=10_000)
        cov = sigma**2 * state.covariance(1, pts)
        np.testing.assert_allclose(np.cov(draws), cov, rtol=0.05)
        se = np.sqrt(np.diag(cov) / 10_000)
        assert np.all(np.abs(draws.mean(axis=1) - state.mean(1, pts)) < 3 * se)


class TestExport:
    def test_round_trip(self, toy):
        state = toy[3]
        payload = json.loads(json.dumps(state.to_dict()))
        back = PosteriorState.from_dict(payload)
        grid = np.linspace(0, 1, 11)[:, None]
        np.testing.assert_array_equal(back.mean(1, grid), state.mean(1, grid))
        np.testing.assert_allclose(back.variance(0, grid), state.variance(0, grid), rtol=1e-14)
        assert back.sigma_hat_sq == state.sigma_hat_sq

    def test_wrong_format(self):
        with pytest.raises(ParameterError):
            PosteriorState.from_dict({"format": "other"})
