"""Shared experimental setup: the default mixture, seed ranges, and a lazily
built context holding the artifacts every schedule/solver/cache comparison
needs (dense reference, collected ensemble, geometry profile, teacher)."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

from .flows import GaussianMixture, GMMField
from .geometry import build_profile
from .schedules import (DEFAULT_BETA_PARAMS, BetaScheduleParams, beta_schedule, gits_schedule,
                        tors_schedule, uniform_schedule)
from .solvers import SolverConfig, run_ensemble

log = logging.getLogger(__name__)

# Well-separated, tight modes: trajectories bend sharply late in sampling,
# the regime where step placement matters more than solver order.
DEFAULT_MIXTURE = {"d": 32, "k": 4, "radius": 20.0, "scale": 0.25, "seed": 0}

COLLECT_SEEDS = range(1000, 1100)
EVAL_SEEDS = range(5000, 5128)
REFERENCE_SOLVER = SolverConfig("multistep", 2)


def default_mixture() -> GaussianMixture:
    return GaussianMixture.random(**DEFAULT_MIXTURE)


def default_field() -> GMMField:
    return GMMField(default_mixture())


@dataclass
class SweepContext:
    """Artifacts derived from one velocity field, built on first use."""

    field: object
    eval_seeds: tuple = tuple(EVAL_SEEDS)
    collect_seeds: tuple = tuple(COLLECT_SEEDS)
    collect_steps: int = 100
    teacher_count: int = 64
    reference_steps: int = 1000
    beta_params: BetaScheduleParams = DEFAULT_BETA_PARAMS
    profile: object = None
    _collected: list | None = None
    _reference: list | None = None
    _schedules: dict = field(default_factory=dict)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def collected(self):
        with self._lock:
            if self._collected is None:
                self._collected = run_ensemble(self.field, uniform_schedule(self.collect_steps),
                                               seeds=self.collect_seeds)
            return self._collected

    def get_profile(self):
        with self._lock:
            if self.profile is None:
                self.profile = build_profile(self.collected())
            return self.profile

    def teacher(self):
        return self.collected()[:self.teacher_count]

    def reference(self):
        with self._lock:
            if self._reference is None:
                self._reference = run_ensemble(self.field, uniform_schedule(self.reference_steps),
                                               REFERENCE_SOLVER, seeds=self.eval_seeds)
            return self._reference

    def schedule(self, kind: str, N: int):
        with self._lock:
            key = (kind, N)
            if key not in self._schedules:
                if kind == "uniform":
                    s = uniform_schedule(N)
                elif kind == "beta":
                    s = beta_schedule(N, self.beta_params)
                elif kind == "gits":
                    s = gits_schedule(self.teacher(), self.field, N)
                elif kind == "tors":
                    s = tors_schedule(self.get_profile(), N)
                else:
                    raise ValueError(f"unknown schedule kind {kind!r}")
                self._schedules[key] = s
            return self._schedules[key]
