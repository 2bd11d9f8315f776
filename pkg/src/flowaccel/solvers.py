"""Outer-schedule discretization of dx/dt = u(x, t) from t = 1 down to t = 0."""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .caching import CacheConfig, CostReport, FeatureStore, cached_forward

TRAJ_MAGIC = b"FLOWTRAJ"
TRAJ_VERSION = 1


class SolverError(RuntimeError):
    pass


@dataclass
class Schedule:
    """Strictly increasing timestamps with t_0 = 0 and t_N = 1 exactly."""

    timestamps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if ts.ndim != 1 or ts.size < 2:
            raise ValueError("a schedule needs at least two timestamps")
        if ts[0] != 0.0 or ts[-1] != 1.0:
            raise ValueError(f"schedule must start at 0 and end at 1, got {float(ts[0])!r} .. {float(ts[-1])!r}")
        if not np.all(np.diff(ts) > 0):
            raise ValueError("schedule timestamps must be strictly increasing")
        self.timestamps = ts

    @property
    def N(self) -> int:
        return self.timestamps.size - 1

    def descending(self) -> np.ndarray:
        return self.timestamps[::-1]

    def digest(self) -> bytes:
        return hashlib.sha256(np.ascontiguousarray(self.timestamps, dtype="<f8").tobytes()).digest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Schedule) and np.array_equal(self.timestamps, other.timestamps)


@dataclass(frozen=True)
class SolverConfig:
    kind: str = "euler"
    order: int = 1

    def __post_init__(self):
        if self.kind not in ("euler", "multistep"):
            raise ValueError(f"unknown solver kind {self.kind!r}")
        if self.order < 1 or (self.kind == "euler" and self.order != 1):
            raise ValueError("euler has order 1; multistep order must be >= 1")

    @property
    def label(self) -> str:
        return "euler" if self.kind == "euler" else f"multistep{self.order}"


@dataclass
class Trajectory:
    """States visited by one solve, ordered from t = 1 down to t = 0."""

    times: np.ndarray
    states: np.ndarray
    seed: int = 0
    schedule_hash: bytes = b"\0" * 32
    cost: CostReport = field(default_factory=CostReport)
    cost_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.times.size:
            raise ValueError("one state per time required")
        if self.times.size >= 2 and not np.all(np.diff(self.times) < 0):
            raise ValueError("trajectory times must be strictly decreasing")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory states must be finite")

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, t: float) -> np.ndarray:
        """Linear interpolation in t."""
        if not self.times[-1] <= t <= self.times[0]:
            raise ValueError(f"t={t} outside trajectory range [{self.times[-1]}, {self.times[0]}]")
        tt = self.times[::-1]
        ss = self.states[::-1]
        j = int(np.searchsorted(tt, t))
        if j < tt.size and tt[j] == t:
            return ss[j].copy()
        w = (t - tt[j - 1]) / (tt[j] - tt[j - 1])
        return (1.0 - w) * ss[j - 1] + w * ss[j]

    # -- binary format ---------------------------------------------------
    def to_bytes(self) -> bytes:
        header = TRAJ_MAGIC + struct.pack("<IIIQ", TRAJ_VERSION, self.dim, self.times.size, self.seed)
        header += self.schedule_hash
        body = np.column_stack([self.times, self.states]).astype("<f8").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Trajectory":
        if raw[:8] != TRAJ_MAGIC:
            raise ValueError("not a trajectory file (bad magic)")
        version, d, n, seed = struct.unpack_from("<IIIQ", raw, 8)
        if version != TRAJ_VERSION:
            raise ValueError(f"unsupported trajectory version {version}")
        off = 8 + 20
        digest = raw[off:off + 32]
        off += 32
        data = np.frombuffer(raw, dtype="<f8", offset=off)
        if data.size != n * (d + 1):
            raise ValueError("truncated trajectory file")
        data = data.reshape(n, d + 1).astype(float)
        return cls(data[:, 0], data[:, 1:], seed=seed, schedule_hash=digest)

    def save(self, path) -> None:
        from .net import _atomic_write_bytes

        _atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Trajectory":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{i}" for i in range(self.dim)])
        for t, s in zip(self.times, self.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in s])
        return buf.getvalue()


def draw_noise(seed: int, d: int) -> np.ndarray:
    """Initial state x_1 ~ N(0, I) from a counter-based (Philox) stream."""
    return np.random.Generator(np.random.Philox(key=int(seed))).standard_normal(d)


def euler_step(x, t_from: float, t_to: float, v) -> np.ndarray:
    if not t_to < t_from:
        raise ValueError("euler_step integrates backwards in time: need t_to < t_from")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise SolverError("non-finite input to euler_step")
    return x + (t_to - t_from) * v


def multistep_coefficients(target_interval, history_times) -> np.ndarray:
    """Adams-Bashforth weights on an arbitrary grid.

    ``history_times[0]`` must be the start of ``target_interval``; the
    remaining times move monotonically away from the target.  Each weight is
    the mean over the target interval of the Lagrange basis polynomial of
    one history node.
    """
    t_from, t_to = map(float, target_interval)
    h = np.asarray(history_times, dtype=float)
    m = h.size
    if m < 1:
        raise ValueError("need at least one history time")
    if h[0] != t_from:
        raise ValueError("first history time must equal the start of the target interval")
    if np.unique(h).size != m:
        raise ValueError("duplicate history times")
    if m > 1:
        away = np.sign(t_from - t_to)
        if not np.all(np.diff(h) * away > 0):
            raise ValueError("history times must move monotonically away from the target")
    if m == 1:
        return np.ones(1)
    # Gauss-Legendre with m nodes integrates degree 2m-1 exactly
    nodes, gw = np.polynomial.legendre.leggauss(m)
    z = 0.5 * (t_to - t_from) * nodes + 0.5 * (t_to + t_from)
    omega = np.empty(m)
    for i in range(m):
        basis = np.ones_like(z)
        for j in range(m):
            if j != i:
                basis *= (z - h[j]) / (h[i] - h[j])
        omega[i] = 0.5 * np.dot(gw, basis)
    return omega


def _integrate(field, x, times, solver: SolverConfig, cache: CacheConfig | None):
    """Shared stepping loop on a batch of states ``x`` of shape (B, d)."""
    n_steps = times.size - 1
    cache = cache or CacheConfig()
    if cache.inner is not None and cache.inner.n_steps != n_steps:
        raise ValueError(f"inner schedule has {cache.inner.n_steps} steps, outer schedule has {n_steps}")
    store = FeatureStore(cache.order)
    history: deque = deque(maxlen=solver.order)
    states = [x]
    cost = CostReport()
    trace = []
    for n in range(n_steps):
        t_from, t_to = times[n], times[n + 1]
        v, store, delta = cached_forward(field, x, t_from, cache, store, n)
        cost = cost + delta
        trace.append(delta)
        history.appendleft((t_from, v))
        k = len(history)
        if k == 1:
            x = euler_step(x, t_from, t_to, v)
        else:
            w = multistep_coefficients((t_from, t_to), [hh[0] for hh in history])
            x = x + (t_to - t_from) * sum(wi * hh[1] for wi, hh in zip(w, history))
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite state after step {n} (t={t_to})")
        states.append(x)
    return np.stack(states), cost, trace


def run_sampler(field, schedule: Schedule, solver: SolverConfig | None = None,
                cache: CacheConfig | None = None, seed: int = 0) -> Trajectory:
    solver = solver or SolverConfig()
    x1 = draw_noise(seed, field.dim)
    states, cost, trace = _integrate(field, x1[None], schedule.descending(), solver, cache)
    return Trajectory(schedule.descending(), states[:, 0], seed=int(seed),
                      schedule_hash=schedule.digest(), cost=cost, cost_trace=trace)


def run_ensemble(field, schedule: Schedule, solver: SolverConfig | None = None,
                 cache: CacheConfig | None = None, seeds=range(1)) -> list[Trajectory]:
    """Vectorized :func:`run_sampler` over several seeds.

    Results match per-seed runs up to floating-point rounding of the batched
    field evaluation; cost reports are per trajectory.
    """
    solver = solver or SolverConfig()
    seeds = [int(s) for s in seeds]
    x1 = np.stack([draw_noise(s, field.dim) for s in seeds])
    states, cost, trace = _integrate(field, x1, schedule.descending(), solver, cache)
    times = schedule.descending()
    digest = schedule.digest()
    return [Trajectory(times, states[:, i], seed=s, schedule_hash=digest, cost=cost, cost_trace=trace)
            for i, s in enumerate(seeds)]


def endpoints(trajs) -> np.ndarray:
    return np.stack([tr.endpoint for tr in trajs])
