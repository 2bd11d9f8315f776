import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flowaccel.flows import (COSINE, RECTIFIED, T_EPS, DomainError, GaussianMixture, GMMField, clamp_time,
                             conditional_velocity, get_path, marginal_velocity_gmm, standard_gaussian_solution)
from flowaccel.schedules import uniform_schedule
from flowaccel.solvers import SolverConfig, run_sampler


def test_paths_endpoints():
    for p in (RECTIFIED, COSINE):
        assert p.alpha(0.0) == pytest.approx(1.0) and p.sigma(0.0) == pytest.approx(0.0)
        assert p.alpha(1.0) == pytest.approx(0.0, abs=1e-15) and p.sigma(1.0) == pytest.approx(1.0)
        for t in np.linspace(0.01, 0.99, 9):
            assert p.alpha(t) > 0 and p.sigma(t) > 0
            h = 1e-6
            assert p.alpha_dot(t) == pytest.approx((p.alpha(t + h) - p.alpha(t - h)) / (2 * h), rel=1e-6)
            assert p.sigma_dot(t) == pytest.approx((p.sigma(t + h) - p.sigma(t - h)) / (2 * h), rel=1e-6)
    with pytest.raises(ValueError):
        get_path("nope")


def test_clamp_time():
    assert clamp_time(0.0) == T_EPS and clamp_time(1.0) == 1 - T_EPS and clamp_time(0.3) == 0.3


@given(st.floats(0.01, 0.99), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_conditional_velocity_rectified_is_difference(t, x0, x1):
    x0, x1 = np.array(x0), np.array(x1)
    xt = (1 - t) * x0 + t * x1
    np.testing.assert_allclose(conditional_velocity(xt, x0, t), x1 - x0, atol=1e-9 * (1 + abs(x1).max() / t))


def test_conditional_velocity_examples():
    np.testing.assert_array_equal(conditional_velocity(np.zeros(3), np.zeros(3), 0.4), np.zeros(3))
    assert conditional_velocity(np.array([1.0]), np.array([2.0]), 0.5)[0] == pytest.approx(-2.0, abs=1e-15)
    # cosine path: matches d/dt of the interpolant
    x0, x1, t = np.array([0.3, -1.0]), np.array([1.2, 0.4]), 0.37
    xt = COSINE.alpha(t) * x0 + COSINE.sigma(t) * x1
    np.testing.assert_allclose(conditional_velocity(xt, x0, t, COSINE),
                               COSINE.alpha_dot(t) * x0 + COSINE.sigma_dot(t) * x1, atol=1e-12)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_conditional_velocity_domain(t):
    with pytest.raises(DomainError):
        conditional_velocity(np.ones(2), np.ones(2), t)


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.6], np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        GaussianMixture([1.0], np.zeros((1, 2)), -np.ones((1, 2)))
    with pytest.raises(ValueError):
        GaussianMixture([1.0], np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.4, 1.0]]]))
    g = GaussianMixture([0.25, 0.75], np.zeros((2, 3)), np.ones((2, 3)))
    assert g.covariances.shape == (2, 3, 3)


def test_mixture_roundtrip(tmp_path, small_gmm):
    small_gmm.save(tmp_path / "m.json")
    g = GaussianMixture.load(tmp_path / "m.json")
    np.testing.assert_array_equal(g.means, small_gmm.means)
    np.testing.assert_array_equal(g.covariances, small_gmm.covariances)


@pytest.mark.parametrize("x,t", [(0.7, 0.3), (-1.5, 0.6), (2.0, 0.85)])
def test_standard_gaussian_field_monte_carlo(x, t):
    """Closed form vs self-normalized importance sampling of E[x1 - x0 | x_t = x]
    with x0 drawn from the prior, 1e6 samples, 3 standard errors."""
    rng = np.random.default_rng(12345)
    n = 1_000_000
    x0 = rng.standard_normal(n)
    # likelihood of x_t = x given x0: N(x; (1-t) x0, t^2)
    logw = -0.5 * ((x - (1 - t) * x0) / t) ** 2
    w = np.exp(logw - logw.max())
    u = (x - x0) / t  # x1 - x0 with x1 = (x - (1-t) x0) / t
    est = np.sum(w * u) / np.sum(w)
    se = math.sqrt(np.sum(w**2 * (u - est) ** 2)) / np.sum(w)
    exact = x * (2 * t - 1) / ((1 - t) ** 2 + t**2)
    field = GMMField(GaussianMixture.standard(1))
    assert field(np.array([x]), t)[0] == pytest.approx(exact, abs=1e-12)
    assert abs(est - exact) < 3 * se


def test_two_component_monte_carlo():
    g = GaussianMixture([0.3, 0.7], [[-1.0], [2.0]], [[0.5], [0.2]])
    x, t = 0.4, 0.55
    rng = np.random.default_rng(7)
    n = 1_000_000
    x0 = g.sample(n, rng)[:, 0]
    logw = -0.5 * ((x - (1 - t) * x0) / t) ** 2
    w = np.exp(logw - logw.max())
    u = (x - x0) / t
    est = np.sum(w * u) / np.sum(w)
    se = math.sqrt(np.sum(w**2 * (u - est) ** 2)) / np.sum(w)
    assert abs(marginal_velocity_gmm(np.array([x]), t, g)[0] - est) < 3 * se


def test_symmetric_mixture_zero_at_origin():
    m = np.array([1.0, -2.0, 0.5])
    g = GaussianMixture([0.5, 0.5], np.stack([m, -m]), np.ones((2, 3)) * 0.3)
    for t in (0.1, 0.5, 0.9):
        np.testing.assert_allclose(marginal_velocity_gmm(np.zeros(3), t, g), 0.0, atol=1e-14)


def test_far_component_underflow():
    cov = np.array([[0.5, 0.1], [0.1, 0.3]])
    g = GaussianMixture([0.5, 0.5], [[0.0, 0.0], [1e3, 1e3]], np.stack([cov, np.eye(2)]))
    single = GMMField(GaussianMixture([1.0], [[0.0, 0.0]], cov[None]))
    x = np.array([0.3, -0.2])
    for t in (0.05, 0.5, 0.95):
        np.testing.assert_allclose(marginal_velocity_gmm(x, t, g), single(x, t), atol=1e-10)


def test_marginal_equals_weighted_components(small_gmm):
    """Responsibility weights recomputed with scipy densities."""
    rng = np.random.default_rng(0)
    field = GMMField(small_gmm)
    for t in (0.1, 0.45, 0.8):
        x = rng.standard_normal(small_gmm.dim) * 2
        a, s = 1 - t, t
        logp = np.array([np.log(w) + stats.multivariate_normal(a * m, a * a * c + s * s * np.eye(len(m))).logpdf(x)
                         for w, m, c in zip(small_gmm.weights, small_gmm.means, small_gmm.covariances)])
        resp = np.exp(logp - logp.max())
        resp /= resp.sum()
        comps = [GMMField(GaussianMixture([1.0], [m], c[None]))(x, t)
                 for m, c in zip(small_gmm.means, small_gmm.covariances)]
        np.testing.assert_allclose(field(x, t), np.sum(resp[:, None] * comps, axis=0), rtol=1e-9, atol=1e-10)


def test_field_batched_matches_single(small_field):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((5, small_field.dim))
    batch = small_field(X, 0.3)
    for i in range(5):
        np.testing.assert_allclose(batch[i], small_field(X[i], 0.3), rtol=1e-13, atol=1e-13)
    np.testing.assert_array_equal(small_field(X, 0.3), small_field(X, 0.3))


def test_eigenvalue_floor_flagged():
    g = GaussianMixture([1.0], [[0.0]], [[1e-30]])
    f = GMMField(g, eig_floor=1e-12)
    v = f(np.array([0.1]), 1e-7)
    assert np.all(np.isfinite(v))
    assert f.diagnostics.clamped_evaluations >= 1


def test_marginal_domain():
    with pytest.raises(DomainError):
        marginal_velocity_gmm(np.zeros(1), 0.0, GaussianMixture.standard(1))


def test_fine_solve_matches_closed_form():
    field = GMMField(GaussianMixture.standard(3))
    tr = run_sampler(field, uniform_schedule(10_000), SolverConfig("multistep", 2), seed=4)
    x1 = tr.states[0]
    for t in (0.75, 0.5, 0.2, 0.0):
        exact = standard_gaussian_solution(x1, t)
        assert np.linalg.norm(tr.state_at(t) - exact) / np.linalg.norm(exact) < 1e-4
