"""Geometry of sampling trajectories in their top-3 principal subspace."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.interpolate import CubicSpline

log = logging.getLogger(__name__)

ARC_LENGTH_SCALE = 1000.0
DEGENERATE_FLOOR = 1e-9


@dataclass
class PcaBasis:
    origin_shift: np.ndarray  # per-trajectory initial points, (n_traj, d)
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance_ratio: np.ndarray  # top-k ratios
    spectrum: np.ndarray  # every squared singular value, descending

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.explained_variance_ratio)


@dataclass
class ProjectedCurve:
    times: np.ndarray
    points: np.ndarray  # (n, 3)
    arc_lengths: np.ndarray
    total_length: float

    @classmethod
    def from_points(cls, points, times=None) -> "ProjectedCurve":
        points = np.asarray(points, dtype=float)
        if times is None:
            times = np.linspace(1.0, 0.0, len(points))
        s = chord_lengths(points)
        return cls(np.asarray(times, dtype=float), points, s, float(s[-1]))


def chord_lengths(points) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _as_state_arrays(trajectories):
    out = []
    for tr in trajectories:
        if hasattr(tr, "states"):
            out.append((np.asarray(tr.times, dtype=float), np.asarray(tr.states, dtype=float)))
        else:
            arr = np.asarray(tr, dtype=float)
            out.append((np.linspace(1.0, 0.0, len(arr)), arr))
    return out


def _svd_basis(points, k):
    _, sv, vt = np.linalg.svd(points, full_matrices=False)
    energy = sv**2
    total = energy.sum()
    ratio = energy[:k] / total if total > 0 else np.zeros(k)
    return vt[:k].copy(), ratio, energy


def _orient(comps, points, rel: float = 1e-3):
    """Fix SVD sign ambiguity: flip each axis so the first coordinate (in
    sampling order) exceeding ``rel`` of its largest magnitude is positive.
    The result depends only on the geometry of ``points``, so rotated copies
    of one curve project identically and keep a consistent handedness."""
    proj = points @ comps.T
    for j in range(comps.shape[0]):
        col = np.abs(proj[:, j])
        peak = col.max() if col.size else 0.0
        if peak == 0.0:
            continue
        first = int(np.argmax(col > rel * peak))
        if proj[first, j] < 0:
            comps[j] = -comps[j]
    return comps


def pca_project(trajectories, k: int = 3, mode: str = "pooled"):
    """Shift each trajectory to start at the origin and project it onto the
    top-k principal directions (uncentered second-moment PCA).

    ``mode="pooled"`` fits one basis on all shifted points;
    ``mode="per-trajectory"`` fits a basis per trajectory and reports the
    explained-variance ratios averaged over the ensemble (``components`` then
    holds the basis of the first trajectory).
    """
    data = _as_state_arrays(trajectories)
    if not data:
        raise ValueError("empty trajectory ensemble")
    d = data[0][1].shape[1]
    if any(s.shape[1] != d for _, s in data):
        raise ValueError("trajectories disagree on dimension")
    if d < k:
        raise ValueError(f"dimension {d} is smaller than the projection rank {k}")
    shifts = np.stack([s[0] for _, s in data])
    shifted = [s - s[0] for _, s in data]
    if sum(len(s) for s in shifted) < k + 1:
        raise ValueError("need at least k + 1 pooled points")
    if mode == "pooled":
        pooled = np.concatenate(shifted)
        comps, ratio, energy = _svd_basis(pooled, k)
        comps = _orient(comps, pooled)
        curves = [ProjectedCurve.from_points(s @ comps.T, t) for (t, _), s in zip(data, shifted)]
        return PcaBasis(shifts, comps, ratio, energy), curves
    if mode != "per-trajectory":
        raise ValueError(f"unknown PCA mode {mode!r}")
    curves, ratios, spectra, first = [], [], [], None
    for (t, _), s in zip(data, shifted):
        comps, ratio, energy = _svd_basis(s, k)
        comps = _orient(comps, s)
        if len(ratio) < k:
            ratio = np.pad(ratio, (0, k - len(ratio)))
        first = comps if first is None else first
        ratios.append(ratio)
        spectra.append(np.pad(energy / max(energy.sum(), 1e-300), (0, d - len(energy)))[:d])
        curves.append(ProjectedCurve.from_points(s @ comps.T, t))
    return PcaBasis(shifts, first, np.mean(ratios, axis=0), np.mean(spectra, axis=0)), curves


def arc_length_parameterize(curve: ProjectedCurve, n_intervals: int | None = 1000,
                            total: float | None = ARC_LENGTH_SCALE,
                            interp: str = "linear") -> ProjectedCurve:
    """Rescale chordal arc length to ``total`` and resample on a uniform grid.

    ``n_intervals=None`` keeps the original samples; ``total=None`` keeps
    physical lengths.  ``interp`` is "linear" or "cubic" (a not-a-knot
    spline through the samples in chordal arc length).
    """
    pts = np.asarray(curve.points, dtype=float)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    s = chord_lengths(pts)
    S = float(s[-1])
    if S <= 0.0:
        raise ValueError("curve has zero total length")
    scale = 1.0 if total is None else total / S
    s = s * scale
    if total is not None:
        s[-1] = float(total)  # exact endpoint despite rounding in the rescale
    pts = pts * scale
    keep = np.concatenate([[True], np.diff(s) > 0])
    s, pts, times = s[keep], pts[keep], np.asarray(curve.times, dtype=float)[keep]
    if n_intervals is None:
        return ProjectedCurve(times, pts, s, S)
    grid = np.linspace(0.0, s[-1], n_intervals + 1)
    if interp == "cubic" and len(s) >= 4:
        new_pts = CubicSpline(s, pts, axis=0)(grid)
    elif interp in ("linear", "cubic"):
        new_pts = np.column_stack([np.interp(grid, s, pts[:, j]) for j in range(pts.shape[1])])
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    new_t = np.interp(grid, s, times)
    new_pts[0], new_pts[-1] = pts[0], pts[-1]
    return ProjectedCurve(new_t, new_pts, grid, S)


class CurvatureTorsion(NamedTuple):
    kappa: np.ndarray
    tau: np.ndarray
    degenerate: np.ndarray  # True where torsion was forced to zero


def _window_indices(n: int, window: int) -> np.ndarray:
    half = window // 2
    start = np.clip(np.arange(n) - half, 0, n - window)
    return start[:, None] + np.arange(window)[None]


def estimate_curvature_torsion(curve: ProjectedCurve, window: int = 11, method: str = "lsq",
                               floor: float = DEGENERATE_FLOOR) -> CurvatureTorsion:
    """Curvature and signed torsion at every sample of an arc-length curve.

    ``lsq`` fits a Gaussian-weighted local cubic in arc length around each
    sample (bandwidth ``window / 4`` spacings; the window slides inward at
    the ends) and reads r', r'', r''' off the fit.  ``difference`` is the
    plain forward-difference Frenet frame estimator, kept for comparison.
    """
    pts = np.asarray(curve.points, dtype=float)
    s = np.asarray(curve.arc_lengths, dtype=float)
    n = len(pts)
    if method == "difference":
        return _difference_estimate(pts, s, floor)
    if method != "lsq":
        raise ValueError(f"unknown method {method!r}")
    if window < 5 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 5")
    if window > n:
        raise ValueError(f"window {window} exceeds curve length {n}")
    h = (s[-1] - s[0]) / (n - 1)
    idx = _window_indices(n, window)
    u = (s[idx] - s[:, None]) / h  # (n, w) in units of the mean spacing
    bw = window / 4.0
    wts = np.exp(-0.5 * (u / bw) ** 2)
    A = np.stack([np.ones_like(u), u, u**2 / 2.0, u**3 / 6.0], axis=-1)  # (n, w, 4)
    AtW = np.swapaxes(A, 1, 2) * wts[:, None, :]
    coef = np.linalg.solve(AtW @ A, AtW @ pts[idx])  # (n, 4, 3)
    d1 = coef[:, 1] / h
    d2 = coef[:, 2] / h**2
    d3 = coef[:, 3] / h**3
    return _frenet_from_derivatives(d1, d2, d3, floor)


def _frenet_from_derivatives(d1, d2, d3, floor):
    cross = np.cross(d1, d2)
    cn = np.linalg.norm(cross, axis=1)
    speed = np.linalg.norm(d1, axis=1)
    kappa = cn / speed**3
    degenerate = cn < floor
    tau = np.zeros_like(kappa)
    ok = ~degenerate
    tau[ok] = np.einsum("ij,ij->i", cross[ok], d3[ok]) / cn[ok] ** 2
    return CurvatureTorsion(kappa, tau, degenerate)


def _difference_estimate(pts, s, floor):
    ds = np.diff(s)
    T = np.diff(pts, axis=0) / ds[:, None]
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    dT = np.diff(T, axis=0) / ds[1:, None]
    kappa = np.linalg.norm(dT, axis=1)
    degenerate = kappa < floor
    Nv = np.zeros_like(dT)
    Nv[~degenerate] = dT[~degenerate] / kappa[~degenerate, None]
    B = np.cross(T[:-1], Nv)
    dB = np.diff(B, axis=0) / ds[2:, None]
    tau = -np.einsum("ij,ij->i", Nv[:-1], dB)
    bad = degenerate[:-1] | degenerate[1:]
    tau[bad] = 0.0
    n = len(pts)
    k_out = np.concatenate([kappa, np.repeat(kappa[-1:], n - len(kappa))])
    t_out = np.concatenate([tau, np.repeat(tau[-1:] if len(tau) else [0.0], n - len(tau))])
    d_out = np.concatenate([degenerate[:-1] | degenerate[1:],
                            np.ones(n - len(tau), dtype=bool)]) if len(tau) else np.ones(n, bool)
    return CurvatureTorsion(k_out, t_out, d_out)


def _cumulative_piecewise(s, rate):
    return np.concatenate([[0.0], np.cumsum(0.5 * np.diff(s) * (rate[1:] + rate[:-1]))])


def _antiderivative_at(s, rate, cum, x):
    j = int(np.clip(np.searchsorted(s, x, side="right") - 1, 0, len(s) - 2))
    w = (x - s[j]) / (s[j + 1] - s[j])
    rx = rate[j] + w * (rate[j + 1] - rate[j])
    return cum[j] + 0.5 * (x - s[j]) * (rate[j] + rx)


def total_rotation(profile, s1: float, s2: float) -> float:
    """Integral of the Darboux magnitude over [s1, s2].

    The rate is taken piecewise linear between grid points, so the result is
    additive over adjacent intervals.
    """
    if s2 < s1:
        raise ValueError(f"reversed bounds: s1={s1} > s2={s2}")
    s = np.asarray(profile.s_grid, dtype=float)
    if s1 < s[0] or s2 > s[-1]:
        raise ValueError(f"[{s1}, {s2}] outside the profile grid [{s[0]}, {s[-1]}]")
    if s1 == s2:
        return 0.0
    rate = rotation_rate(profile)
    cum = _cumulative_piecewise(s, rate)
    return float(_antiderivative_at(s, rate, cum, s2) - _antiderivative_at(s, rate, cum, s1))


def rotation_rate(profile) -> np.ndarray:
    """|omega| along the profile grid, honoring the profile's averaging mode."""
    omega = getattr(profile, "omega", None)
    if getattr(profile, "averaging", "separate") == "magnitude" and omega is not None:
        return np.asarray(omega, dtype=float)
    return np.sqrt(np.asarray(profile.kappa) ** 2 + np.asarray(profile.tau) ** 2)


@dataclass
class GeometryProfile:
    s_grid: np.ndarray
    kappa: np.ndarray
    tau: np.ndarray
    s_to_t: np.ndarray
    omega: np.ndarray | None = None
    averaging: str = "separate"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("s_grid", "kappa", "tau", "s_to_t"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.omega is None:
            self.omega = np.sqrt(self.kappa**2 + self.tau**2)
        self.omega = np.asarray(self.omega, dtype=float)
        n = self.s_grid.size
        if any(a.size != n for a in (self.kappa, self.tau, self.s_to_t, self.omega)):
            raise ValueError("profile columns must share the grid length")
        if not np.all(np.diff(self.s_grid) > 0):
            raise ValueError("profile grid must be strictly increasing")
        if np.any(self.kappa < 0):
            raise ValueError("curvature must be nonnegative")
        if np.any(np.diff(self.s_to_t) > 0):
            raise ValueError("s_to_t must be nonincreasing in s")
        if self.averaging not in ("separate", "magnitude"):
            raise ValueError("averaging must be 'separate' or 'magnitude'")

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.s_grid, self.kappa, self.tau, self.s_to_t, self.omega):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        h.update(self.averaging.encode())
        return h.hexdigest()[:16]

    # -- text format ------------------------------------------------------
    def to_text(self) -> str:
        meta = dict(self.meta, averaging=self.averaging)
        lines = [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(meta.items())]
        lines.append("s,kappa,tau,omega,s_to_t")
        for row in zip(self.s_grid, self.kappa, self.tau, self.omega, self.s_to_t):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GeometryProfile":
        meta, rows, header = {}, [], None
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = json.loads(val)
            elif header is None:
                header = line.strip().split(",")
            else:
                rows.append([float(v) for v in line.split(",")])
        if header != ["s", "kappa", "tau", "omega", "s_to_t"]:
            raise ValueError(f"unexpected profile columns {header}")
        a = np.array(rows)
        averaging = meta.pop("averaging", "separate")
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 4], omega=a[:, 3], averaging=averaging, meta=meta)

    def save(self, path) -> None:
        from .net import _atomic_write_bytes

        _atomic_write_bytes(path, self.to_text().encode())

    @classmethod
    def load(cls, path) -> "GeometryProfile":
        with open(path) as fh:
            return cls.from_text(fh.read())


def curve_geometry(curve: ProjectedCurve, n_intervals: int = 1000, window: int = 11,
                   interp: str = "cubic"):
    """Arc-length parameterize one projected curve and estimate kappa, tau."""
    ac = arc_length_parameterize(curve, n_intervals=n_intervals, interp=interp)
    return ac, estimate_curvature_torsion(ac, window=window)


def build_profile(trajectories, window: int = 11, n_intervals: int = 1000,
                  averaging: str = "separate", interp: str = "cubic",
                  pca_mode: str = "per-trajectory", curves=None) -> GeometryProfile:
    """Average curvature/torsion statistics of an ensemble on a common s-grid.

    ``curves`` may carry already projected curves (skips the PCA step).
    """
    trajectories = list(trajectories)
    meta: dict = {}
    if curves is None:
        if not trajectories:
            raise ValueError("empty trajectory ensemble")
        basis, curves = pca_project(trajectories, mode=pca_mode)
        meta["pca_mode"] = pca_mode
        meta["explained_variance"] = [float(v) for v in basis.explained_variance_ratio]
        meta["explained_variance_cumulative"] = float(basis.cumulative[-1])
    if not curves:
        raise ValueError("empty trajectory ensemble")
    ks, ts, ws, tmaps, degenerate = [], [], [], [], 0
    grid = None
    for c in curves:
        ac, est = curve_geometry(c, n_intervals, window, interp)
        grid = ac.arc_lengths
        ks.append(est.kappa)
        ts.append(est.tau)
        ws.append(np.sqrt(est.kappa**2 + est.tau**2))
        tmaps.append(ac.times)
        degenerate += int(est.degenerate.sum())
    s_to_t = np.mean(tmaps, axis=0)
    repaired = bool(np.any(np.diff(s_to_t) > 0))
    if repaired:
        log.warning("averaged s->t map was not monotone; applying isotonic repair")
        s_to_t = np.minimum.accumulate(s_to_t)
    meta.update({
        "count": len(curves),
        "steps": int(len(curves[0].times) - 1),
        "seeds": [int(getattr(tr, "seed", 0)) for tr in trajectories],
        "window": window,
        "interp": interp,
        "degenerate_points": degenerate,
        "s_to_t_repaired": repaired,
    })
    return GeometryProfile(grid, np.mean(ks, axis=0), np.mean(ts, axis=0), s_to_t,
                           omega=np.mean(ws, axis=0), averaging=averaging, meta=meta)


def integrate_frenet(s, kappa, tau, r0, frame0) -> np.ndarray:
    """Rebuild a curve from curvature and torsion with classical RK4.

    ``frame0`` is the 3x3 matrix with rows T, N, B at s[0].
    """
    s = np.asarray(s, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    tau = np.asarray(tau, dtype=float)

    def rhs(state, k, t):
        T, N, B = state[1], state[2], state[3]
        return np.stack([T, k * N, -k * T + t * B, -t * N])

    state = np.vstack([np.asarray(r0, dtype=float)[None], np.asarray(frame0, dtype=float)])
    out = [state[0].copy()]
    for i in range(len(s) - 1):
        h = s[i + 1] - s[i]
        km, tm = 0.5 * (kappa[i] + kappa[i + 1]), 0.5 * (tau[i] + tau[i + 1])
        k1 = rhs(state, kappa[i], tau[i])
        k2 = rhs(state + 0.5 * h * k1, km, tm)
        k3 = rhs(state + 0.5 * h * k2, km, tm)
        k4 = rhs(state + h * k3, kappa[i + 1], tau[i + 1])
        state = state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(state[0].copy())
    return np.array(out)
