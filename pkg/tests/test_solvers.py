import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from flowaccel.flows import T_EPS, GaussianMixture, GMMField, standard_gaussian_solution
from flowaccel.schedules import beta_schedule, uniform_schedule, DEFAULT_BETA_PARAMS
from flowaccel.solvers import (Schedule, SolverConfig, SolverError, Trajectory, draw_noise, euler_step,
                               multistep_coefficients, run_ensemble, run_sampler)


class ConstantField:
    kind = "constant"
    n_blocks = 0

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)
        self.dim = self.c.size

    def __call__(self, x, t):
        return np.broadcast_to(self.c, np.shape(x)).copy()


class LinearInTime:
    """u(x, t) = a + b t, independent of x."""

    kind = "linear-t"
    n_blocks = 0

    def __init__(self, a, b):
        self.a, self.b = np.asarray(a, float), np.asarray(b, float)
        self.dim = self.a.size

    def __call__(self, x, t):
        return np.broadcast_to(self.a + self.b * t, np.shape(x)).copy()


def lagrange_oracle(target, hist):
    """Mean of each Lagrange basis polynomial over the target interval by adaptive quadrature."""
    t_from, t_to = target
    out = []
    for i, hi in enumerate(hist):
        def basis(s, i=i):
            v = 1.0
            for j, hj in enumerate(hist):
                if j != i:
                    v *= (s - hj) / (hi - hj)
            return v
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, _ = integrate.quad(basis, t_from, t_to, epsabs=1e-14, epsrel=1e-14)
        out.append(val / (t_to - t_from))
    return np.array(out)


# -- schedule type -------------------------------------------------------------

def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(np.array([0.0, 0.5, 0.9]))
    with pytest.raises(ValueError):
        Schedule(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        Schedule(np.array([1.0]))
    s = Schedule(np.array([0.0, 0.25, 1.0]))
    assert s.N == 2 and list(s.descending()) == [1.0, 0.25, 0.0]
    assert s == Schedule([0.0, 0.25, 1.0]) and s.digest() == Schedule([0.0, 0.25, 1.0]).digest()


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("euler", 2)
    with pytest.raises(ValueError):
        SolverConfig("rk4")
    assert SolverConfig("multistep", 2).label == "multistep2"


# -- euler ---------------------------------------------------------------------

def test_euler_step_examples():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(euler_step(x, 0.7, 0.2, np.zeros(2)), x)
    assert euler_step(np.array([0.0]), 1.0, 0.9, np.array([1.0]))[0] == pytest.approx(-0.1, abs=1e-15)
    with pytest.raises(ValueError):
        euler_step(x, 0.2, 0.7, x)
    with pytest.raises(SolverError):
        euler_step(np.array([np.nan]), 1.0, 0.5, np.array([1.0]))


@pytest.mark.parametrize("sched", [uniform_schedule(7), beta_schedule(9, DEFAULT_BETA_PARAMS),
                                   Schedule([0.0, 0.013, 0.5, 0.51, 1.0])])
@pytest.mark.parametrize("solver", [SolverConfig(), SolverConfig("multistep", 3)])
def test_constant_field_exact(sched, solver):
    c = np.array([0.5, -1.25, 2.0])
    tr = run_sampler(ConstantField(c), sched, solver, seed=11)
    np.testing.assert_allclose(tr.endpoint, tr.states[0] - c, atol=1e-13)


def test_one_step_euler(small_field):
    tr = run_sampler(small_field, uniform_schedule(1), seed=3)
    x1 = draw_noise(3, small_field.dim)
    np.testing.assert_array_equal(tr.states[0], x1)
    np.testing.assert_allclose(tr.endpoint, x1 - small_field(x1, 1 - T_EPS), rtol=1e-15, atol=1e-15)
    assert tr.times.tolist() == [1.0, 0.0]


def euler_growth_factor(N):
    """Euler on dx/dt = x r(t), r(t) = (2t - 1) / ((1 - t)^2 + t^2), is a pure
    product of scalar factors; computed here without the package."""
    f = 1.0
    for n in range(N):
        t = min(max(1.0 - n / N, T_EPS), 1 - T_EPS)
        f *= 1.0 - (1.0 / N) * (2 * t - 1) / ((1 - t) ** 2 + t**2)
    return f


def test_euler_single_gaussian_against_product_oracle():
    field = GMMField(GaussianMixture.standard(8))
    for N in (1000, 2000):
        oracle = abs(euler_growth_factor(N) - 1.0)  # closed form maps x1 to itself at t = 0
        for seed in range(3):
            tr = run_sampler(field, uniform_schedule(N), seed=seed)
            exact = standard_gaussian_solution(tr.states[0], 0.0)
            rel = np.linalg.norm(tr.endpoint - exact) / np.linalg.norm(exact)
            assert rel == pytest.approx(oracle, rel=1e-9)
    # first order: 1.2846e-3 at N = 1000, halving with N
    assert euler_growth_factor(1000) - 1 == pytest.approx(-1.2846e-3, rel=1e-3)
    assert abs(euler_growth_factor(2000) - 1.0) < 1e-3


def test_determinism(small_field):
    a = run_sampler(small_field, uniform_schedule(12), SolverConfig("multistep", 2), seed=9)
    b = run_sampler(small_field, uniform_schedule(12), SolverConfig("multistep", 2), seed=9)
    assert a.to_bytes() == b.to_bytes()


def test_ensemble_matches_single_runs(small_field):
    trajs = run_ensemble(small_field, uniform_schedule(10), SolverConfig("multistep", 2), seeds=[4, 5, 6])
    for tr in trajs:
        single = run_sampler(small_field, uniform_schedule(10), SolverConfig("multistep", 2), seed=tr.seed)
        np.testing.assert_allclose(tr.states, single.states, rtol=1e-12, atol=1e-12)


def test_noise_is_seeded():
    np.testing.assert_array_equal(draw_noise(5, 4), draw_noise(5, 4))
    assert not np.array_equal(draw_noise(5, 4), draw_noise(6, 4))


def test_nonfinite_state_aborts():
    class Blowup(ConstantField):
        def __call__(self, x, t):
            return np.full(np.shape(x), np.inf if t < 0.5 else 1.0)

    with pytest.raises(SolverError, match="step"):
        run_sampler(Blowup([0.0, 0.0]), uniform_schedule(4), seed=0)


def test_cost_report_counts_evaluations(small_field):
    tr = run_sampler(small_field, uniform_schedule(6), seed=0)
    assert tr.cost.full_evaluations == 6 and tr.cost.block_evaluations == 0


# -- multistep -----------------------------------------------------------------

def test_multistep_examples():
    np.testing.assert_array_equal(multistep_coefficients((0.6, 0.4), [0.6]), [1.0])
    h = 0.1
    np.testing.assert_allclose(multistep_coefficients((0.5, 0.5 - h), [0.5, 0.5 + h]), [1.5, -0.5], atol=1e-14)
    # non-uniform: frozen oracle values for history {0.5, 0.8}, target [0.5, 0.3]
    frozen = np.array([4.0 / 3.0, -1.0 / 3.0])
    np.testing.assert_allclose(lagrange_oracle((0.5, 0.3), [0.5, 0.8]), frozen, atol=1e-13)
    np.testing.assert_allclose(multistep_coefficients((0.5, 0.3), [0.5, 0.8]), frozen, atol=1e-13)
    # uniform third order: classical Adams-Bashforth [23, -16, 5] / 12
    np.testing.assert_allclose(multistep_coefficients((0.4, 0.3), [0.4, 0.5, 0.6]),
                               np.array([23, -16, 5]) / 12, atol=1e-13)


def test_multistep_errors():
    with pytest.raises(ValueError):
        multistep_coefficients((0.5, 0.3), [0.5, 0.5])
    with pytest.raises(ValueError):
        multistep_coefficients((0.5, 0.3), [0.6, 0.8])
    with pytest.raises(ValueError):
        multistep_coefficients((0.5, 0.3), [0.5, 0.4])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 0.3), min_size=1, max_size=4), st.floats(0.01, 0.3), st.floats(0.05, 0.6))
def test_multistep_matches_quadrature_oracle(gaps, h, start):
    hist = start + np.concatenate([[0.0], np.cumsum(gaps)])
    target = (start, start - h)
    w = multistep_coefficients(target, hist)
    np.testing.assert_allclose(w, lagrange_oracle(target, hist), rtol=1e-8, atol=1e-8)
    assert abs(w.sum() - 1.0) < 1e-12


def test_multistep_exact_on_linear_in_time_field():
    """Every multistep-2 update whose history avoids the clamped t = 1
    evaluation integrates a field linear in t exactly."""
    f = LinearInTime([0.3, -1.0], [2.0, 0.5])
    sched = Schedule([0.0, 0.07, 0.2, 0.41, 0.55, 0.8, 1.0])
    tr = run_sampler(f, sched, SolverConfig("multistep", 2), seed=1)
    t = tr.times
    for n in range(2, len(t) - 1):
        exact = f.a * (t[n + 1] - t[n]) + 0.5 * f.b * (t[n + 1] ** 2 - t[n] ** 2)
        np.testing.assert_allclose(tr.states[n + 1] - tr.states[n], exact, atol=1e-14)


def test_order_ramp_up_first_step_is_euler(small_field):
    a = run_sampler(small_field, uniform_schedule(5), SolverConfig("multistep", 3), seed=2)
    b = run_sampler(small_field, uniform_schedule(5), SolverConfig(), seed=2)
    np.testing.assert_array_equal(a.states[:2], b.states[:2])


# -- trajectory file ----------------------------------------------------------

def test_trajectory_roundtrip(tmp_path, small_field):
    tr = run_sampler(small_field, uniform_schedule(5), seed=123456789)
    tr.save(tmp_path / "a.traj")
    back = Trajectory.load(tmp_path / "a.traj")
    np.testing.assert_array_equal(back.states, tr.states)
    np.testing.assert_array_equal(back.times, tr.times)
    assert back.seed == 123456789 and back.schedule_hash == uniform_schedule(5).digest()
    raw = (tmp_path / "a.traj").read_bytes()
    with pytest.raises(ValueError):
        Trajectory.from_bytes(b"NOTATRAJ" + raw[8:])
    with pytest.raises(ValueError):
        Trajectory.from_bytes(raw[:-3])
    lines = tr.to_csv().splitlines()
    assert lines[0].startswith("t,x0") and len(lines) == 7
    assert float(lines[1].split(",")[0]) == 1.0


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory([0.0, 1.0], np.zeros((2, 1)))
    with pytest.raises(ValueError):
        Trajectory([1.0, 0.0], np.array([[0.0], [np.nan]]))
    tr = Trajectory([1.0, 0.5, 0.0], np.array([[0.0], [1.0], [3.0]]))
    assert tr.state_at(0.25)[0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        tr.state_at(1.5)
