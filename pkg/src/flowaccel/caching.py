"""Inner schedules, feature stores, and cached network evaluation.

A cache level decides which part of the network is skipped on a reuse step:

* ``velocity``    -- the whole model output is predicted, nothing runs;
* ``transformer`` -- the summed residual of all blocks is predicted, the
  input/output projections are recomputed;
* ``block``       -- every block residual is predicted (or, with per-block
  masks, only the skipped blocks are);
* ``operation``   -- every sub-operation residual is predicted and summed
  back through the block glue.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .flows import clamp_time
from .net import OPS_PER_BLOCK, ResidualFlowNet, sum_residuals

LEVELS = ("velocity", "transformer", "block", "operation")


class NotApplicable(ValueError):
    """The requested cache configuration cannot run on the given field."""


@dataclass
class CostReport:
    full_evaluations: int = 0
    block_evaluations: int = 0
    operation_evaluations: int = 0

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(
            self.full_evaluations + other.full_evaluations,
            self.block_evaluations + other.block_evaluations,
            self.operation_evaluations + other.operation_evaluations,
        )

    def as_dict(self) -> dict:
        return {
            "full_evaluations": self.full_evaluations,
            "block_evaluations": self.block_evaluations,
            "operation_evaluations": self.operation_evaluations,
        }


@dataclass
class InnerSchedule:
    """Compute/reuse flags per sampling step (step 0 starts at t = 1).

    ``mask`` is boolean with True meaning compute.  A 2-D mask of shape
    (N, n_blocks) carries independent flags for every block.
    """

    mask: np.ndarray
    derivation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim not in (1, 2) or self.mask.shape[0] < 1:
            raise ValueError("inner schedule mask must be (N,) or (N, n_blocks) with N >= 1")
        if not np.all(self.mask[0]):
            raise ValueError("the first step of an inner schedule must compute")

    @property
    def n_steps(self) -> int:
        return self.mask.shape[0]

    @property
    def per_block(self) -> bool:
        return self.mask.ndim == 2

    @property
    def n_compute(self) -> int:
        m = self.mask if self.mask.ndim == 1 else self.mask.all(axis=1)
        return int(m.sum())

    def step_computes(self, n: int) -> bool:
        return bool(np.all(self.mask[n]))

    @classmethod
    def all_compute(cls, n: int) -> "InnerSchedule":
        return cls(np.ones(n, dtype=bool), {"kind": "explicit"})


def build_inner_schedule(N: int, C: int, N_warm: int = 0) -> InnerSchedule:
    """Cycle-based inner schedule with an optional warm-up phase.

    The compute budget is that of the plain cycle schedule (ceil(N / C));
    with a warm-up, the trailing compute steps are dropped until the budget
    matches again.
    """
    if N < 1 or C < 1 or N_warm < 0:
        raise ValueError("need N >= 1, C >= 1, N_warm >= 0")
    budget = math.ceil(N / C)
    if C == 1:
        return InnerSchedule(np.ones(N, dtype=bool), {"kind": "cycle", "C": 1, "N_warm": N_warm})
    if N_warm > budget:
        raise ValueError(f"warm-up of {N_warm} compute steps exceeds the budget of {budget}")
    mask = np.zeros(N, dtype=bool)
    mask[:N_warm] = True
    mask[N_warm::C] = True
    mask[0] = True
    excess = int(mask.sum()) - budget
    for n in range(N - 1, -1, -1):
        if excess <= 0:
            break
        if mask[n] and n >= max(N_warm, 1):
            mask[n] = False
            excess -= 1
    if excess > 0:
        raise ValueError("infeasible inner schedule budget")
    return InnerSchedule(mask, {"kind": "cycle", "C": C, "N_warm": N_warm})


def taylor_coefficients(order: int, step_offsets) -> np.ndarray:
    """Extrapolation weights for a feature at offset 0 from stored features.

    ``step_offsets`` are the positions of the stored features relative to
    the target (most recent first, e.g. ``[-1, -3]`` for C = 2).  The
    weights evaluate the degree ``order - 1`` interpolating polynomial at 0,
    i.e. finite-difference Taylor extrapolation.
    """
    offs = np.asarray(step_offsets, dtype=float)[:order]
    if order < 1 or offs.size < order:
        raise ValueError(f"order {order} needs at least {order} offsets")
    if np.unique(offs).size != offs.size:
        raise ValueError("duplicate step offsets")
    gamma = np.ones(order)
    for i in range(order):
        for j in range(order):
            if i != j:
                gamma[i] *= (0.0 - offs[j]) / (offs[i] - offs[j])
    return gamma


@dataclass
class CacheConfig:
    inner: InnerSchedule | None = None
    level: str = "velocity"
    order: int = 1
    offsets: str = "index"  # or "time"

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown cache level {self.level!r}")
        if self.order < 1:
            raise ValueError("predictor order must be >= 1")
        if self.offsets not in ("index", "time"):
            raise ValueError("offsets must be 'index' or 'time'")


class FeatureStore:
    """Ring buffers of the last ``capacity`` stored values per cached unit."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._units: dict[str, deque] = {}

    def push(self, unit: str, step: int, t: float, value: np.ndarray) -> None:
        buf = self._units.setdefault(unit, deque(maxlen=self.capacity))
        if buf and buf[0][0] >= step:
            raise ValueError(f"store entries for {unit!r} must be pushed in step order")
        buf.appendleft((step, t, value))

    def history(self, unit: str) -> list:
        return list(self._units.get(unit, ()))

    def __len__(self) -> int:
        return len(self._units)

    def predict(self, unit: str, step: int, t: float, order: int, offsets: str = "index") -> np.ndarray:
        hist = self.history(unit)
        if not hist:
            raise ValueError(f"reuse requested for {unit!r} but nothing has been stored")
        k = min(order, len(hist))
        if offsets == "index":
            offs = [h[0] - step for h in hist[:k]]
        else:
            offs = [h[1] - t for h in hist[:k]]
        gamma = taylor_coefficients(k, offs)
        return sum_residuals([g * h[2] for g, h in zip(gamma, hist[:k])])


def full_cost(field) -> CostReport:
    nb = getattr(field, "n_blocks", 0)
    return CostReport(1, nb, nb * OPS_PER_BLOCK)


def cached_forward(field, x, t: float, config: CacheConfig, store: FeatureStore, step_index: int):
    """Evaluate (or predict) the velocity at ``(x, t)`` for sampling step ``step_index``.

    Returns ``(velocity, store, cost)`` where ``cost`` counts exactly the
    units executed on this call.
    """
    level = config.level
    net = field if isinstance(field, ResidualFlowNet) else None
    if level != "velocity" and net is None:
        raise NotApplicable(f"{level} cache needs a residual network, got {getattr(field, 'kind', field)!r}")
    inner = config.inner
    row = True if inner is None else inner.mask[step_index]
    te = clamp_time(t)

    if inner is not None and inner.per_block:
        if level != "block":
            raise NotApplicable("per-block inner schedules require the block cache level")
        return _block_masked(net, x, t, te, np.asarray(row), config, store, step_index)

    if bool(row):
        return _compute(field, net, x, t, te, level, store, step_index)

    # reuse step
    pred = lambda unit: store.predict(unit, step_index, t, config.order, config.offsets)  # noqa: E731
    if level == "velocity":
        return pred("velocity"), store, CostReport()
    c = net.conditioning(te)
    h0 = net.input_projection(np.atleast_2d(x), c)
    if level == "transformer":
        h = h0 + pred("transformer")
    elif level == "block":
        h = h0
        for b in range(net.n_blocks):
            h = h + pred(f"block{b}")
    else:
        h = h0
        for b in range(net.n_blocks):
            h = h + sum_residuals([pred(f"block{b}.op{k}") for k in range(OPS_PER_BLOCK)])
    v = net.output_projection(h)
    return _shape_like(v, x), store, CostReport()


def _shape_like(v, x):
    return v[0] if np.ndim(x) == 1 else v


def _compute(field, net, x, t, te, level, store, step):
    if net is None:
        v = field(x, te)
        store.push("velocity", step, t, v)
        return v, store, full_cost(field)
    v, res = net.forward(np.atleast_2d(x), te, return_residuals=True)
    v = _shape_like(v, x)
    if level == "velocity":
        store.push("velocity", step, t, v)
    elif level == "transformer":
        store.push("transformer", step, t, sum_residuals(res["blocks"]))
    elif level == "block":
        for b, r in enumerate(res["blocks"]):
            store.push(f"block{b}", step, t, r)
    else:
        for b, ops in enumerate(res["ops"]):
            for k, r in enumerate(ops):
                store.push(f"block{b}.op{k}", step, t, r)
    return v, store, full_cost(net)


def _block_masked(net, x, t, te, row, config, store, step):
    c = net.conditioning(te)
    h = net.input_projection(np.atleast_2d(x), c)
    cost = CostReport()
    for b in range(net.n_blocks):
        if row[b]:
            r, _ = net.block(b, h, c)
            store.push(f"block{b}", step, t, r)
            cost.block_evaluations += 1
            cost.operation_evaluations += OPS_PER_BLOCK
        else:
            r = store.predict(f"block{b}", step, t, config.order, config.offsets)
        h = h + r
    if row.all():
        cost.full_evaluations += 1
    return _shape_like(net.output_projection(h), x), store, cost


def profile_block_changes(net: ResidualFlowNet, schedule, seed: int = 0) -> np.ndarray:
    """Relative L1 change of every block residual between consecutive steps.

    Row 0 is zero (no previous step).  Runs a plain Euler solve from the
    seeded noise draw.
    """
    from .solvers import draw_noise

    times = np.asarray(schedule.timestamps)[::-1]
    x = draw_noise(seed, net.d)[None]
    out = np.zeros((len(times) - 1, net.n_blocks))
    prev = None
    for n in range(len(times) - 1):
        v, res = net.forward(x, clamp_time(times[n]), return_residuals=True)
        cur = res["blocks"]
        if prev is not None:
            for b in range(net.n_blocks):
                out[n, b] = np.abs(cur[b] - prev[b]).sum() / max(np.abs(prev[b]).sum(), 1e-300)
        prev = cur
        x = x + (times[n + 1] - times[n]) * v
    return out


def block_mask_schedule(N: int, blocks: int, cache_ratio: float, changes=None) -> InnerSchedule:
    """Per-block inner schedule that skips the least-changing blocks.

    ``changes`` is the (N, blocks) output of :func:`profile_block_changes`.
    After the first step, ``round(cache_ratio * blocks)`` blocks with the
    smallest change are reused at every step (ties broken by block index).
    """
    if not 0.0 <= cache_ratio <= 1.0:
        raise ValueError("cache_ratio must lie in [0, 1]")
    if changes is None or np.size(changes) == 0:
        raise ValueError("block_mask_schedule needs profiling data")
    changes = np.asarray(changes, dtype=float)
    if changes.shape != (N, blocks):
        raise ValueError(f"profiling data must have shape {(N, blocks)}, got {changes.shape}")
    n_skip = int(round(cache_ratio * blocks))
    mask = np.ones((N, blocks), dtype=bool)
    for n in range(1, N):
        order = np.argsort(changes[n], kind="stable")
        mask[n, order[:n_skip]] = False
    return InnerSchedule(mask, {"kind": "per-block", "cache_ratio": cache_ratio})
