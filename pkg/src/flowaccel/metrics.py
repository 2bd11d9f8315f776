"""Trajectory- and sample-level quality measures."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

MODES = ("reference", "cross")


@dataclass
class AlignedTrajectoryPair:
    """Target, baseline and reference states on one shared t-grid."""

    grid: np.ndarray
    target: np.ndarray
    baseline: np.ndarray
    reference: np.ndarray


def align(target, baseline, reference, grid=None) -> AlignedTrajectoryPair:
    lo = max(tr.times[-1] for tr in (target, baseline, reference))
    hi = min(tr.times[0] for tr in (target, baseline, reference))
    if grid is None:
        grid = target.times
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < lo) or np.any(grid > hi):
        raise ValueError(f"alignment grid leaves the common time range [{lo}, {hi}]")
    return AlignedTrajectoryPair(
        grid,
        np.stack([target.state_at(t) for t in grid]),
        np.stack([baseline.state_at(t) for t in grid]),
        np.stack([reference.state_at(t) for t in grid]),
    )


class RelativeError(NamedTuple):
    value: float
    mode: str


def _e_rel(x, x_hat, x_bar, mode):
    if mode == "reference":
        # target-to-reference minus baseline-to-reference
        return np.linalg.norm(x_bar - x, axis=-1) - np.linalg.norm(x_bar - x_hat, axis=-1)
    if mode == "cross":
        # target-to-reference minus baseline-to-target
        return np.linalg.norm(x_bar - x, axis=-1) - np.linalg.norm(x_hat - x, axis=-1)
    raise ValueError(f"mode must be one of {MODES}")


def relative_trajectory_error(target, baseline, reference, t: float, mode: str = "reference") -> RelativeError:
    """Signed comparison of ``target`` against ``baseline`` relative to
    ``reference`` at time ``t``.  Negative means the target is closer to the
    reference than the baseline is ("reference" mode)."""
    pair = align(target, baseline, reference, grid=[t])
    return RelativeError(float(_e_rel(pair.target[0], pair.baseline[0], pair.reference[0], mode)), mode)


def relative_error_curve(target, baseline, reference, grid=None, mode: str = "reference") -> dict:
    pair = align(target, baseline, reference, grid)
    return {"mode": mode, "t": pair.grid, "e_rel": _e_rel(pair.target, pair.baseline, pair.reference, mode)}


def endpoint_error(candidate, reference) -> float:
    if candidate.dim != reference.dim:
        raise ValueError(f"dimension mismatch: {candidate.dim} vs {reference.dim}")
    return float(np.linalg.norm(candidate.endpoint - reference.endpoint))


def mean_endpoint_error(candidates, references) -> float:
    if len(candidates) != len(references):
        raise ValueError("candidate and reference ensembles differ in size")
    for c, r in zip(candidates, references):
        if c.seed != r.seed:
            raise ValueError(f"seed mismatch: {c.seed} vs {r.seed}")
    return float(np.mean([endpoint_error(c, r) for c, r in zip(candidates, references)]))


class EnergyDistance(NamedTuple):
    value: float
    n_a: int
    n_b: int


def _mean_pairwise(a, b, chunk: int = 2048) -> float:
    if a.shape[1] == 1 and b.shape[1] == 1:
        return _mean_abs_diff_1d(a[:, 0], b[:, 0])
    total = 0.0
    for i in range(0, len(a), chunk):
        total += cdist(a[i:i + chunk], b).sum()
    return total / (len(a) * len(b))


def _mean_abs_diff_1d(a, b) -> float:
    """E|a_i - b_j| over all pairs in O((n + m) log m)."""
    b = np.sort(b)
    csum = np.concatenate([[0.0], np.cumsum(b)])
    k = np.searchsorted(b, a, side="right")
    m = len(b)
    below = a * k - csum[k]
    above = (csum[m] - csum[k]) - a * (m - k)
    return float((below + above).sum() / (len(a) * m))


def distribution_distance(samples_a, samples_b) -> EnergyDistance:
    """Energy distance 2 E|X - Y| - E|X - X'| - E|Y - Y'| (V-statistic)."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    val = 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return EnergyDistance(max(float(val), 0.0), len(a), len(b))


# -- pairwise compatibility ---------------------------------------------------

@dataclass(frozen=True)
class MethodConfig:
    """One point in the solver x schedule x cache-object x inner x predictor space."""

    schedule: str = "uniform"
    solver: str = "euler"
    level: str = "velocity"
    cycle: int = 1
    warmup: int = 0
    order: int = 1

    def replace(self, **kw) -> "MethodConfig":
        return MethodConfig(**{**self.__dict__, **kw})


# label -> (axis, overrides)
METHODS = {
    "uniform": ("schedule", {"schedule": "uniform"}),
    "beta": ("schedule", {"schedule": "beta"}),
    "gits": ("schedule", {"schedule": "gits"}),
    "tors": ("schedule", {"schedule": "tors"}),
    "euler": ("solver", {"solver": "euler"}),
    "multistep-2": ("solver", {"solver": "multistep-2"}),
    "velocity-cache": ("cache-object", {"level": "velocity"}),
    "transformer-cache": ("cache-object", {"level": "transformer"}),
    "block-cache": ("cache-object", {"level": "block"}),
    "operation-cache": ("cache-object", {"level": "operation"}),
    "cycle-2": ("inner", {"cycle": 2}),
    "cycle-3": ("inner", {"cycle": 3}),
    "warmup-2": ("inner", {"cycle": 2, "warmup": 2}),
    "taylor-1": ("predictor", {"order": 1}),
    "taylor-2": ("predictor", {"order": 2}),
}


@dataclass
class CompatibilityCell:
    row: str
    col: str
    score: float
    status: str = "ok"  # ok | n/a | failed
    message: str = ""
    cost: dict = field(default_factory=dict)
    config: MethodConfig | None = None


@dataclass
class CompatibilityMatrix:
    labels: list
    cells: list  # row-major, len(labels) ** 2

    def cell(self, a: str, b: str) -> CompatibilityCell:
        n = len(self.labels)
        return self.cells[self.labels.index(a) * n + self.labels.index(b)]

    def scores(self) -> np.ndarray:
        n = len(self.labels)
        return np.array([c.score for c in self.cells], dtype=float).reshape(n, n)


def combine(base: MethodConfig, a: str, b: str) -> MethodConfig:
    """Apply methods ``a`` and ``b`` on top of ``base``.  Two different
    methods on the same axis cannot be combined."""
    for m in (a, b):
        if m not in METHODS:
            raise KeyError(f"unknown method {m!r}")
    axis_a, over_a = METHODS[a]
    axis_b, over_b = METHODS[b]
    if a != b and axis_a == axis_b:
        raise NotImplementedError(f"{a} and {b} are alternatives on the {axis_a} axis")
    return base.replace(**over_a).replace(**over_b)


def evaluate_method(context, method: MethodConfig, budget: int):
    """Mean endpoint error against the context's dense reference with
    ``budget`` full evaluations per sample.  Returns ``(score, cost)``."""
    from .caching import CacheConfig, build_inner_schedule
    from .solvers import SolverConfig, run_ensemble

    N = budget * method.cycle
    inner = None if method.cycle == 1 else build_inner_schedule(N, method.cycle, method.warmup)
    cache = CacheConfig(inner=inner, level=method.level, order=method.order)
    if method.level != "velocity" and getattr(context.field, "n_blocks", 0) == 0:
        from .caching import NotApplicable

        raise NotApplicable(f"{method.level} cache needs a residual network")
    solver = SolverConfig() if method.solver == "euler" else SolverConfig("multistep", int(method.solver.split("-")[1]))
    sched = context.schedule(method.schedule, N)
    ref = context.reference()
    trajs = run_ensemble(context.field, sched, solver, cache, seeds=context.eval_seeds)
    return mean_endpoint_error(trajs, ref), trajs[0].cost.as_dict()


def compatibility_matrix(context, base: MethodConfig, methods, budget: int = 10, jobs: int = 1) -> CompatibilityMatrix:
    """Score every unordered pair of ``methods`` (and each single method on
    the diagonal).  Cells that cannot run are marked, never dropped."""
    from concurrent.futures import ThreadPoolExecutor

    from .caching import NotApplicable

    labels = list(methods)
    for m in labels:
        if m not in METHODS:
            raise KeyError(f"unknown method {m!r}")
    n = len(labels)
    pairs = [(i, j) for i in range(n) for j in range(i, n)]

    def run(pair):
        a, b = labels[pair[0]], labels[pair[1]]
        try:
            cfg = combine(base, a, b)
        except NotImplementedError as exc:
            return CompatibilityCell(a, b, float("nan"), "n/a", str(exc))
        try:
            score, cost = evaluate_method(context, cfg, budget)
        except NotApplicable as exc:
            return CompatibilityCell(a, b, float("nan"), "n/a", str(exc), config=cfg)
        except (ValueError, RuntimeError) as exc:
            log.warning("cell (%s, %s) failed: %s", a, b, exc)
            return CompatibilityCell(a, b, float("nan"), "failed", str(exc), config=cfg)
        return CompatibilityCell(a, b, score, "ok", "", cost, cfg)

    # shared artifacts are built once up front so worker threads only read them
    context.reference()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]

    cells = [None] * (n * n)
    for (i, j), c in zip(pairs, results):
        cells[i * n + j] = c
        cells[j * n + i] = CompatibilityCell(labels[j], labels[i], c.score, c.status, c.message, c.cost, c.config)
    return CompatibilityMatrix(labels, cells)

