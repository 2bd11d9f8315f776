"""Interpolation paths and closed-form Gaussian-mixture velocity fields."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Evaluation times are clamped to [T_EPS, 1 - T_EPS]; the conditional field
# divides by sigma_t and alpha_t, both of which vanish at one endpoint.
T_EPS = 1e-5


class DomainError(ValueError):
    """Raised when a field is evaluated where its formula is undefined."""


@dataclass(frozen=True)
class InterpolationPath:
    """x_t = alpha(t) x_0 + sigma(t) x_1 with x_0 data and x_1 noise."""

    name: str
    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    alpha_dot: Callable[[float], float]
    sigma_dot: Callable[[float], float]


RECTIFIED = InterpolationPath(
    "rectified",
    alpha=lambda t: 1.0 - t,
    sigma=lambda t: t,
    alpha_dot=lambda t: -1.0,
    sigma_dot=lambda t: 1.0,
)

COSINE = InterpolationPath(
    "cosine",
    alpha=lambda t: math.cos(0.5 * math.pi * t),
    sigma=lambda t: math.sin(0.5 * math.pi * t),
    alpha_dot=lambda t: -0.5 * math.pi * math.sin(0.5 * math.pi * t),
    sigma_dot=lambda t: 0.5 * math.pi * math.cos(0.5 * math.pi * t),
)

PATHS = {p.name: p for p in (RECTIFIED, COSINE)}


def get_path(name: str) -> InterpolationPath:
    try:
        return PATHS[name]
    except KeyError:
        raise ValueError(f"unknown path {name!r}; expected one of {sorted(PATHS)}") from None


def clamp_time(t: float) -> float:
    return min(max(float(t), T_EPS), 1.0 - T_EPS)


def conditional_velocity(x_t, x_0, t: float, path: InterpolationPath = RECTIFIED) -> np.ndarray:
    """Velocity of the conditional path through ``x_t`` that started at ``x_0``.

    Raises:
        DomainError: if ``t`` is not strictly inside (0, 1) or the path
            coefficients vanish there.
    """
    if not 0.0 < t < 1.0:
        raise DomainError(f"conditional velocity undefined at t={t}")
    a, s = path.alpha(t), path.sigma(t)
    if a <= 0.0 or s <= 0.0:
        raise DomainError(f"path coefficients must be positive at t={t} (alpha={a}, sigma={s})")
    ad, sd = path.alpha_dot(t), path.sigma_dot(t)
    x_t = np.asarray(x_t, dtype=float)
    x_0 = np.asarray(x_0, dtype=float)
    return (sd / s) * x_t + a * (ad / a - sd / s) * x_0


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covariances, dtype=float)
        k, d = self.means.shape
        if covs.ndim == 2 and covs.shape == (k, d):
            covs = np.stack([np.diag(c) for c in covs])
        self.covariances = covs
        if self.weights.shape != (k,):
            raise ValueError("weights and means disagree on component count")
        if covs.shape != (k, d, d):
            raise ValueError(f"covariances must have shape {(k, d, d)}, got {covs.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2)):
            raise ValueError("covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(covs) <= 0):
            raise ValueError("covariances must be positive definite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def standard(cls, d: int) -> "GaussianMixture":
        return cls(np.ones(1), np.zeros((1, d)), np.eye(d)[None])

    @classmethod
    def random(cls, d: int = 32, k: int = 4, radius: float = 3.0, scale: float = 0.25,
               seed: int = 0) -> "GaussianMixture":
        """Random isotropic-ish mixture: means on a sphere of ``radius``,
        diagonal covariances with standard deviations around ``scale``."""
        rng = np.random.Generator(np.random.Philox(seed))
        dirs = rng.standard_normal((k, d))
        means = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        stds = scale * np.exp(0.25 * rng.standard_normal((k, d)))
        w = rng.uniform(0.5, 1.5, size=k)
        return cls(w / w.sum(), means, stds**2)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        z = rng.standard_normal((n, self.dim))
        return self.means[comps] + np.einsum("nij,nj->ni", chol[comps], z)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        return cls(data["weights"], data["means"], data["covariances"])

    def save(self, path) -> None:
        from .net import _atomic_write_bytes

        _atomic_write_bytes(path, json.dumps(self.to_dict(), sort_keys=True).encode())

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class FieldDiagnostics:
    clamped_evaluations: int = 0


class GMMField:
    """Exact marginal velocity of a flow whose data distribution is a mixture.

    Each component contributes N(alpha mu_i, alpha^2 Sigma_i + sigma^2 I) to
    the marginal at time t; the field is the responsibility-weighted average
    of the per-component Gaussian posterior-mean velocities.
    """

    kind = "analytic-gmm"
    n_blocks = 0

    def __init__(self, gmm: GaussianMixture, path: InterpolationPath = RECTIFIED,
                 eig_floor: float = 1e-12):
        self.gmm = gmm
        self.path = path
        self.eig_floor = eig_floor
        self.diagnostics = FieldDiagnostics()
        lam, q = np.linalg.eigh(gmm.covariances)
        self._lam = lam  # (K, d)
        self._q = q  # (K, d, d)
        self._log_w = np.log(np.where(gmm.weights > 0, gmm.weights, 1.0))
        self._log_w[gmm.weights == 0] = -np.inf

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def component_terms(self, x, t: float):
        """Return (log-responsibilities (B, K), per-component velocities (B, K, d))."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.path
        a, s = p.alpha(t), p.sigma(t)
        ad, sd = p.alpha_dot(t), p.sigma_dot(t)
        if s <= 0.0:
            raise DomainError(f"sigma vanishes at t={t}")
        var = a * a * self._lam + s * s  # (K, d)
        low = var < self.eig_floor
        if np.any(low):
            self.diagnostics.clamped_evaluations += 1
            var = np.maximum(var, self.eig_floor)
        # rotate residuals into each component's eigenbasis
        resid = x[:, None, :] - a * self.gmm.means[None]  # (B, K, d)
        y = np.einsum("kji,bkj->bki", self._q, resid)
        logp = -0.5 * np.sum(y * y / var + np.log(2.0 * np.pi * var), axis=-1)
        logp = logp + self._log_w
        log_resp = logp - _logsumexp(logp)
        post = self.gmm.means[None] + a * np.einsum("kij,bkj->bki", self._q, self._lam / var * y)
        vel = (sd / s) * x[:, None, :] + (ad - a * sd / s) * post
        return log_resp, vel

    def __call__(self, x, t: float) -> np.ndarray:
        squeeze = np.ndim(x) == 1
        log_resp, vel = self.component_terms(x, t)
        out = np.einsum("bk,bkd->bd", np.exp(log_resp), vel)
        return out[0] if squeeze else out


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True))


def marginal_velocity_gmm(x, t: float, gmm: GaussianMixture,
                          path: InterpolationPath = RECTIFIED) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise DomainError(f"marginal velocity requested outside (0, 1): t={t}")
    return GMMField(gmm, path)(x, t)


def standard_gaussian_solution(x1, t: float) -> np.ndarray:
    """Exact ODE solution for a standard-normal target on the rectified path."""
    return np.asarray(x1, dtype=float) * math.sqrt((1.0 - t) ** 2 + t * t)
