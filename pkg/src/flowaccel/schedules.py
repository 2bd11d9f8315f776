"""Outer-schedule constructors: uniform, beta-parameterized, DP (GITS), TORS."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .solvers import Schedule, SolverConfig, endpoints, run_ensemble

log = logging.getLogger(__name__)


class ScheduleRejected(ValueError):
    """Parameters that do not produce a strictly increasing schedule."""


def uniform_schedule(N: int) -> Schedule:
    if N < 1:
        raise ValueError("N must be >= 1")
    return Schedule(np.arange(N + 1) / N, {"generator": "uniform", "N": N})


def regularized_incomplete_beta(t, alpha: float, beta: float):
    """I_t(alpha, beta) = B_t(alpha, beta) / B_1(alpha, beta)."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    out = special.betainc(alpha, beta, t)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BetaScheduleParams:
    alpha: float
    beta: float
    p: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.p >= 0):
            raise ValueError("need alpha > 0, beta > 0, p >= 0")


DEFAULT_BETA_PARAMS = BetaScheduleParams(6.23, 1.34, 0.18)


def beta_schedule(N: int, params: BetaScheduleParams) -> Schedule:
    """t_n = (1 - I_{(N-n)/N}(alpha, beta)) (n/N)^p with exact endpoints.

    The complement is evaluated as I_{n/N}(beta, alpha), which is the same
    quantity without cancellation; with alpha = beta = 1, p = 0 it is n/N
    bit for bit.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    u = np.arange(N + 1) / N
    t = special.betainc(params.beta, params.alpha, u)
    if params.p != 0:
        t = t * u ** params.p
    t[0], t[-1] = 0.0, 1.0
    if not np.all(np.diff(t) > 0):
        raise ScheduleRejected(f"{params} gives a non-monotone {N}-step schedule")
    return Schedule(t, {"generator": "beta", "N": N, "alpha": params.alpha,
                        "beta": params.beta, "p": params.p})


def _endpoint_objective(field, schedule, solver, ref_end, seeds):
    trajs = run_ensemble(field, schedule, solver, seeds=seeds)
    return float(np.mean(np.linalg.norm(endpoints(trajs) - ref_end, axis=1)))


def search_beta_schedule(field, N: int, budget: int, reference, initial=None,
                         solver: SolverConfig | None = None, seed: int = 0,
                         trace: list | None = None) -> BetaScheduleParams:
    """Random search plus coordinate refinement over (alpha, beta, p).

    The objective is the mean endpoint distance between N-step samples and
    the matching ``reference`` trajectories (same seeds).  Candidates are
    evaluated in order: ``initial`` first, then random draws for the first
    half of the remaining budget, then local refinement around the incumbent.
    Ties keep the earlier candidate.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    solver = solver or SolverConfig()
    seeds = [tr.seed for tr in reference]
    ref_end = endpoints(reference)
    rng = np.random.Generator(np.random.Philox(seed))
    queue = list(initial) if initial is not None else [BetaScheduleParams(1.0, 1.0, 0.0)]
    n_random = len(queue) + (budget - len(queue) + 1) // 2
    best, best_val = None, math.inf
    step = np.array([0.5, 0.5, 0.25])
    trace = trace if trace is not None else []

    for i in range(budget):
        if i < len(queue):
            cand = queue[i]
        elif i < n_random or best is None:
            cand = BetaScheduleParams(float(np.exp(rng.uniform(math.log(0.2), math.log(10.0)))),
                                      float(np.exp(rng.uniform(math.log(0.2), math.log(10.0)))),
                                      float(rng.uniform(0.0, 2.0)))
        else:
            k = (i - n_random) % 3
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            vec = np.array([best.alpha, best.beta, best.p])
            if k < 2:
                vec[k] *= math.exp(sign * step[k])
            else:
                vec[k] = max(0.0, vec[k] + sign * step[k])
            if (i - n_random) % 6 == 5:
                step *= 0.7
            cand = BetaScheduleParams(*map(float, vec))
        try:
            sched = beta_schedule(N, cand)
        except ScheduleRejected:
            trace.append({"candidate": cand, "objective": None})
            log.debug("candidate %d %s rejected", i, cand)
            continue
        val = _endpoint_objective(field, sched, solver, ref_end, seeds)
        trace.append({"candidate": cand, "objective": val})
        log.info("candidate %d %s objective %.6g", i, cand, val)
        if val < best_val:
            best, best_val = cand, val
    if best is None:
        raise ScheduleRejected("every candidate produced a non-monotone schedule")
    return best


# -- GITS-style dynamic programming -----------------------------------------

def gits_cost_matrix(teacher, field) -> np.ndarray:
    """D[i, j]: mean Euclidean error of one Euler jump from teacher grid
    point i to grid point j (indices in sampling order, i < j)."""
    from .flows import clamp_time

    times = teacher[0].times
    for tr in teacher[1:]:
        if not np.array_equal(tr.times, times):
            raise ValueError("teacher trajectories must share one time grid")
    X = np.stack([tr.states for tr in teacher], axis=1)  # (M+1, B, d)
    M = times.size - 1
    V = np.stack([field(X[i], clamp_time(times[i])) for i in range(M + 1)])
    D = np.full((M + 1, M + 1), np.inf)
    for i in range(M):
        dt = times[i + 1:] - times[i]  # (M - i,)
        pred = X[i][None] + dt[:, None, None] * V[i][None]
        err = np.linalg.norm(pred - X[i + 1:], axis=2).mean(axis=1)
        D[i, i + 1:] = err
    return D


def gits_path(D: np.ndarray, N: int, dp_coefficient: float = 0.9):
    """Cheapest N-jump path 0 -> M through the cost matrix.

    Jump k (k = 0 first) is weighted by ``dp_coefficient ** k``.  Among
    equal-cost paths the lexicographically smallest index sequence wins.
    Returns ``(indices, cost)``.
    """
    M = D.shape[0] - 1
    if N > M:
        raise ValueError(f"N={N} exceeds the teacher grid size {M}")
    if N < 1:
        raise ValueError("N must be >= 1")
    # to_go[k, i]: cost of finishing from grid index i when jump k is next
    to_go = np.full((N + 1, M + 1), np.inf)
    to_go[N, M] = 0.0
    for k in range(N - 1, -1, -1):
        w = dp_coefficient ** k
        for i in range(M):
            cand = w * D[i, i + 1:] + to_go[k + 1, i + 1:]
            to_go[k, i] = cand.min()
    path = [0]
    for k in range(N):
        i = path[-1]
        cand = dp_coefficient ** k * D[i, i + 1:] + to_go[k + 1, i + 1:]
        path.append(i + 1 + int(np.argmin(cand)))  # argmin returns the first minimizer
    return path, float(to_go[0, 0])


def path_cost(D: np.ndarray, path, dp_coefficient: float = 0.9) -> float:
    return float(sum(dp_coefficient ** k * D[a, b] for k, (a, b) in enumerate(zip(path[:-1], path[1:]))))


def gits_schedule(teacher, field, N: int, dp_coefficient: float = 0.9) -> Schedule:
    D = gits_cost_matrix(teacher, field)
    path, cost = gits_path(D, N, dp_coefficient)
    times = teacher[0].times[path][::-1].copy()
    times[0], times[-1] = 0.0, 1.0
    return Schedule(times, {"generator": "gits", "N": N, "dp_coefficient": dp_coefficient,
                            "dp_cost": cost, "teacher_steps": D.shape[0] - 1,
                            "ensemble": len(teacher)})


def teacher_ensemble(field, seeds, steps: int = 100):
    return run_ensemble(field, uniform_schedule(steps), SolverConfig(), seeds=seeds)


# -- TORS ------------------------------------------------------------------

def cumulative_rotation(profile) -> np.ndarray:
    """Theta(s) on the profile grid by the trapezoidal rule."""
    from .geometry import rotation_rate

    s_grid = np.asarray(profile.s_grid, dtype=float)
    rate = rotation_rate(profile)
    ds = np.diff(s_grid)
    return np.concatenate([[0.0], np.cumsum(0.5 * ds * (rate[1:] + rate[:-1]))])


def _invert_monotone(values, grid, targets):
    """Piecewise-linear inverse of a nondecreasing ``values(grid)``."""
    out = np.empty(len(targets))
    for n, y in enumerate(targets):
        j = int(np.searchsorted(values, y, side="left"))
        if j == 0:
            out[n] = grid[0]
        elif j >= len(values):
            out[n] = grid[-1]
        elif values[j] == values[j - 1]:
            out[n] = grid[j]
        else:
            w = (y - values[j - 1]) / (values[j] - values[j - 1])
            out[n] = grid[j - 1] + w * (grid[j] - grid[j - 1])
    return out


def tors_dividing_arclengths(profile, N: int):
    """Arc lengths splitting the profile into N segments of equal total
    rotation, plus a flag telling whether the equal-arc fallback was used."""
    s = np.asarray(profile.s_grid, dtype=float)
    if N < 1:
        raise ValueError("N must be >= 1")
    if not s[-1] > s[0]:
        raise ValueError("profile has zero total arc length")
    theta = cumulative_rotation(profile)
    if theta[-1] <= 0.0:
        log.warning("profile has zero total rotation; falling back to equal arc length")
        return np.linspace(s[0], s[-1], N + 1), True
    targets = theta[-1] * np.arange(N + 1) / N
    sk = _invert_monotone(theta, s, targets)
    sk[0], sk[-1] = s[0], s[-1]
    return sk, False


def tors_schedule(profile, N: int) -> Schedule:
    sk, fallback = tors_dividing_arclengths(profile, N)
    # s_to_t decreases with s; np.interp needs increasing abscissae which s has
    t = np.interp(sk, profile.s_grid, profile.s_to_t)
    t[0], t[-1] = 1.0, 0.0
    meta = {"generator": "tors", "N": N, "equal_arc_fallback": fallback}
    if getattr(profile, "digest", None):
        meta["profile_hash"] = profile.digest()
    return Schedule(t[::-1].copy(), meta)


# -- schedule file ------------------------------------------------------------

def format_schedule(schedule: Schedule, header: bool = False) -> str:
    """One timestamp per line; metadata as '# key: value' lines on request."""
    lines = [f"# {k}: {v}" for k, v in schedule.meta.items()] if header else []
    lines += [repr(float(t)) for t in schedule.timestamps]
    return "\n".join(lines) + "\n"


def parse_schedule(text: str) -> Schedule:
    meta, values = {}, []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            meta[key.strip()] = val.strip()
            continue
        values.append(float(line))
    return Schedule(np.array(values), meta)


def save_schedule(schedule: Schedule, path, header: bool = False) -> None:
    from .net import _atomic_write_bytes

    _atomic_write_bytes(path, format_schedule(schedule, header).encode())


def load_schedule(path) -> Schedule:
    with open(path) as fh:
        return parse_schedule(fh.read())
