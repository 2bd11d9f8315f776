"""Command-line pipelines with file artifacts at every stage.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, file_digest, load_config

log = logging.getLogger("flowaccel")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- artifact helpers ----------------------------------------------------------

def _write_atomic(path, data) -> None:
    from .net import _atomic_write_bytes

    _atomic_write_bytes(path, data.encode() if isinstance(data, str) else data)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _up_to_date(out_dir, run_hash) -> bool:
    """True when ``out_dir`` already holds outputs of an identical run whose
    files still match their recorded hashes."""
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.isfile(path):
        return False
    try:
        with open(path) as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    if man.get("run_hash") != run_hash:
        return False
    for entry in man.get("files", []):
        full = os.path.join(out_dir, entry["name"])
        if not os.path.isfile(full) or file_digest(full) != entry["sha256"]:
            return False
    return True


def _write_manifest(out_dir, run_hash, command, names, extra=None) -> dict:
    files = [{"name": n, "sha256": file_digest(os.path.join(out_dir, n))} for n in names]
    man = {"command": command, "run_hash": run_hash, "version": __version__, "files": files}
    man.update(extra or {})
    _write_atomic(os.path.join(out_dir, MANIFEST), json.dumps(man, sort_keys=True, indent=2) + "\n")
    return man


def _run_hash(command, *parts) -> str:
    import hashlib

    h = hashlib.sha256(command.encode())
    for p in parts:
        h.update(json.dumps(p, sort_keys=True).encode())
    return h.hexdigest()[:16]


def _ensure_dir(path) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {path}: {exc}") from exc
    return path


# -- loading (validation errors) -------------------------------------------------

def _load_field(cfg: RunConfig):
    from .flows import GaussianMixture, GMMField, get_path
    from .net import ResidualFlowNet

    spec = cfg["field"]
    try:
        path = get_path(spec["path"])
        if spec["net"] is not None:
            return ResidualFlowNet.load(spec["net"])
        gmm = GaussianMixture.load(spec["mixture"]) if spec["mixture"] else _mixture_from(cfg)
        return GMMField(gmm, path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid field specification: {exc}") from exc


def _mixture_from(cfg: RunConfig):
    from .flows import GaussianMixture

    m = cfg["mixture"]
    return GaussianMixture.random(int(m["d"]), int(m["k"]), float(m["radius"]), float(m["scale"]), int(m["seed"]))


def _seed_list(cfg: RunConfig, seed=None):
    start = cfg["seeds"]["start"] if seed is None else seed
    return list(range(start, start + cfg["seeds"]["count"]))


def _solver(cfg: RunConfig):
    from .solvers import SolverConfig

    try:
        return SolverConfig(cfg["solver"]["kind"], int(cfg["solver"]["order"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cache(cfg: RunConfig, N: int):
    from .caching import CacheConfig, build_inner_schedule

    c = cfg["cache"]
    try:
        inner = None if c["cycle"] == 1 else build_inner_schedule(N, int(c["cycle"]), int(c["warmup"]))
        return CacheConfig(inner, c["level"], int(c["order"]), c["offsets"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _schedule(cfg: RunConfig, field=None, N=None):
    from .geometry import GeometryProfile
    from .schedules import (BetaScheduleParams, DEFAULT_BETA_PARAMS, beta_schedule, gits_schedule, load_schedule,
                            teacher_ensemble, tors_schedule, uniform_schedule)

    s = cfg["schedule"]
    N = N or s["N"]
    kind = s["kind"]
    try:
        if s["file"] is not None or kind == "file":
            if s["file"] is None:
                raise ConfigError("schedule.kind 'file' needs schedule.file")
            return load_schedule(s["file"])
        if kind == "uniform":
            return uniform_schedule(N)
        if kind == "beta":
            params = BetaScheduleParams(*s["params"]) if s["params"] else DEFAULT_BETA_PARAMS
            return beta_schedule(N, params)
        if kind == "tors":
            if s["profile"] is None:
                raise ConfigError("schedule.kind 'tors' needs schedule.profile")
            return tors_schedule(GeometryProfile.load(s["profile"]), N)
        if kind == "gits":
            field = field or _load_field(cfg)
            col = cfg["collect"]
            teacher = teacher_ensemble(field, range(col["start"], col["start"] + cfg["sweep"]["teacher_count"]),
                                       steps=col["steps"])
            return gits_schedule(teacher, field, N)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _load_trajectory_dir(path):
    from .solvers import Trajectory

    if not os.path.isdir(path):
        raise ConfigError(f"trajectory directory not found: {path}")
    names = sorted(n for n in os.listdir(path) if n.endswith(".traj"))
    if not names:
        raise ConfigError(f"no trajectory files (*.traj) in {path}")
    try:
        return [Trajectory.load(os.path.join(path, n)) for n in names]
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _traj_name(seed: int) -> str:
    return f"seed-{seed:08d}.traj"


# -- commands --------------------------------------------------------------------

def cmd_gen_mixture(args, cfg: RunConfig) -> int:
    out = _ensure_dir(args.out)
    if args.seed is not None:
        cfg["mixture"]["seed"] = args.seed
    run = _run_hash("gen-mixture", cfg["mixture"])
    if _up_to_date(out, run):
        log.info("%s is up to date", out)
        return EXIT_OK
    try:
        gmm = _mixture_from(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    gmm.save(os.path.join(out, "mixture.json"))
    _write_manifest(out, run, "gen-mixture", ["mixture.json"], {"mixture": cfg["mixture"]})
    return EXIT_OK


def cmd_train_net(args, cfg: RunConfig) -> int:
    from .flows import GaussianMixture, get_path
    from .net import TrainConfig, train_toy_net

    out = _ensure_dir(args.out)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    run = _run_hash("train-net", cfg.digest(), cfg["train"])
    if _up_to_date(out, run):
        log.info("%s is up to date", out)
        return EXIT_OK
    try:
        tc = TrainConfig(**cfg["train"])
        gmm = GaussianMixture.load(cfg["field"]["mixture"]) if cfg["field"]["mixture"] else _mixture_from(cfg)
        path = get_path(cfg["field"]["path"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    net = train_toy_net(gmm, path, tc)
    net.save(os.path.join(out, "net.bin"))
    rows = [(cfg.digest(), tc.seed, h["iteration"], h["val_cfm_loss"], h["field_mse"]) for h in net.history]
    _write_atomic(os.path.join(out, "history.csv"),
                  _csv_text(["config_hash", "seed", "iteration", "val_cfm_loss", "field_mse"], rows))
    _write_manifest(out, run, "train-net", ["net.bin", "history.csv"])
    return EXIT_OK


def _run_seeds(field, schedule, solver, cache, seeds, jobs):
    from .solvers import run_sampler

    def one(seed):
        return run_sampler(field, schedule, solver, cache, seed=seed)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


def cmd_collect(args, cfg: RunConfig) -> int:
    from .schedules import uniform_schedule
    from .solvers import SolverConfig

    out = _ensure_dir(args.out)
    col = cfg["collect"]
    start = col["start"] if args.seed is None else args.seed
    seeds = list(range(start, start + col["count"]))
    run = _run_hash("collect", cfg.digest(), seeds)
    if _up_to_date(out, run):
        log.info("%s is up to date", out)
        return EXIT_OK
    field = _load_field(cfg)
    trajs = _run_seeds(field, uniform_schedule(col["steps"]), SolverConfig(), None, seeds, args.jobs)
    names = []
    for tr in trajs:
        name = _traj_name(tr.seed)
        tr.save(os.path.join(out, name))
        names.append(name)
    _write_manifest(out, run, "collect", names, {"config_hash": cfg.digest(), "seeds": seeds,
                                                 "steps": col["steps"]})
    log.info("collected %d trajectories into %s", len(names), out)
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig) -> int:
    from .geometry import build_profile

    trajs = _load_trajectory_dir(args.input)
    out = _ensure_dir(args.out)
    run = _run_hash("analyze", file_digest(args.input), args.window)
    if _up_to_date(out, run):
        log.info("%s is up to date", out)
        return EXIT_OK
    profile = build_profile(trajs, window=args.window)
    profile.save(os.path.join(out, "profile.txt"))
    report = {k: profile.meta[k] for k in ("pca_mode", "explained_variance", "explained_variance_cumulative",
                                           "count", "degenerate_points")}
    log.info("explained variance (top 3): %s, cumulative %.6f",
             report["explained_variance"], report["explained_variance_cumulative"])
    _write_atomic(os.path.join(out, "explained_variance.json"), json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_manifest(out, run, "analyze", ["profile.txt", "explained_variance.json"])
    return EXIT_OK


def cmd_schedule(args, cfg: RunConfig) -> int:
    from .schedules import save_schedule

    out = _ensure_dir(args.out)
    sec = cfg["schedule"]
    if args.kind:
        sec["kind"] = args.kind
    if args.N:
        sec["N"] = args.N
    if args.params:
        try:
            sec["params"] = [float(v) for v in args.params.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--params must be comma-separated numbers: {exc}") from exc
        if len(sec["params"]) != 3:
            raise ConfigError("--params needs alpha,beta,p")
    if args.profile:
        if not os.path.isfile(args.profile):
            raise ConfigError(f"profile file not found: {args.profile}")
        sec["profile"] = os.path.abspath(args.profile)
    run = _run_hash("schedule", cfg.digest())
    if _up_to_date(out, run):
        log.info("%s is up to date", out)
        return EXIT_OK
    sched = _schedule(cfg)
    save_schedule(sched, os.path.join(out, "schedule.txt"))
    meta = {k: (v if isinstance(v, (int, float, str, bool)) else str(v)) for k, v in sched.meta.items()}
    _write_atomic(os.path.join(out, "schedule.meta.json"), json.dumps(meta, sort_keys=True, indent=2) + "\n")
    _write_manifest(out, run, "schedule", ["schedule.txt", "schedule.meta.json"])
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    out = _ensure_dir(args.out)
    seeds = _seed_list(cfg, args.seed)
    run = _run_hash("sample", cfg.digest(), seeds)
    if _up_to_date(out, run):
        log.info("%s is up to date", out)
        return EXIT_OK
    field = _load_field(cfg)
    sched = _schedule(cfg, field)
    solver = _solver(cfg)
    cache = _cache(cfg, sched.N)
    trajs = _run_seeds(field, sched, solver, cache, seeds, args.jobs)
    h = cfg.digest()
    names, rows = [], []
    for tr in trajs:
        name = _traj_name(tr.seed)
        tr.save(os.path.join(out, name))
        names.append(name)
        c = tr.cost
        rows.append((h, tr.seed, sched.N, c.full_evaluations, c.block_evaluations, c.operation_evaluations))
    _write_atomic(os.path.join(out, "costs.csv"),
                  _csv_text(["config_hash", "seed", "steps", "full_evaluations", "block_evaluations",
                             "operation_evaluations"], rows))
    names.append("costs.csv")
    _write_manifest(out, run, "sample", names, {"config_hash": h, "seeds": seeds})
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .metrics import distribution_distance, endpoint_error, relative_error_curve
    from .plotting import line_plot_svg
    from .solvers import endpoints

    ev = cfg["evaluate"]
    for key in ("target", "baseline", "reference"):
        val = getattr(args, key)
        if val is not None:
            if not os.path.isdir(val):
                raise ConfigError(f"{key} directory not found: {val}")
            ev[key] = os.path.abspath(val)
        if ev[key] is None:
            raise ConfigError(f"evaluate needs a {key} trajectory directory")
    target = {t.seed: t for t in _load_trajectory_dir(ev["target"])}
    baseline = {t.seed: t for t in _load_trajectory_dir(ev["baseline"])}
    reference = {t.seed: t for t in _load_trajectory_dir(ev["reference"])}
    seeds = sorted(set(target) & set(baseline) & set(reference))
    if not seeds:
        raise ConfigError("target, baseline and reference share no seeds")
    out = _ensure_dir(args.out)
    run = _run_hash("evaluate", cfg.digest(), args.mode)
    if _up_to_date(out, run):
        log.info("%s is up to date", out)
        return EXIT_OK
    h = cfg.digest()
    rows, curves = [], []
    for s in seeds:
        tg, bl, rf = target[s], baseline[s], reference[s]
        lo = max(tr.times[-1] for tr in (tg, bl, rf))
        hi = min(tr.times[0] for tr in (tg, bl, rf))
        grid = np.linspace(hi, lo, ev["grid"])
        curve = relative_error_curve(tg, bl, rf, grid, args.mode)
        curves.append(curve["e_rel"])
        rows.append((h, s, args.mode, endpoint_error(tg, rf), endpoint_error(bl, rf),
                     float(np.mean(curve["e_rel"])), float(curve["e_rel"][-1])))
    _write_atomic(os.path.join(out, "metrics.csv"),
                  _csv_text(["config_hash", "seed", "mode", "endpoint_error_target", "endpoint_error_baseline",
                             "e_rel_mean", "e_rel_final"], rows))
    ed_t = distribution_distance(endpoints([target[s] for s in seeds]), endpoints([reference[s] for s in seeds]))
    ed_b = distribution_distance(endpoints([baseline[s] for s in seeds]), endpoints([reference[s] for s in seeds]))
    seed_label = f"{seeds[0]}-{seeds[-1]}"
    summary = [(h, seed_label, args.mode, "target", float(np.mean([r[3] for r in rows])), ed_t.value, ed_t.n_a),
               (h, seed_label, args.mode, "baseline", float(np.mean([r[4] for r in rows])), ed_b.value, ed_b.n_a)]
    _write_atomic(os.path.join(out, "summary.csv"),
                  _csv_text(["config_hash", "seed", "mode", "run", "mean_endpoint_error", "energy_distance",
                             "n_samples"], summary))
    svg = line_plot_svg({"mean E_rel": (grid, np.mean(curves, axis=0))}, title=f"relative error ({args.mode})",
                        xlabel="t", ylabel="E_rel")
    _write_atomic(os.path.join(out, "e_rel.svg"), svg)
    _write_manifest(out, run, "evaluate", ["metrics.csv", "summary.csv", "e_rel.svg"], {"config_hash": h})
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    from .geometry import GeometryProfile
    from .metrics import METHODS, MethodConfig, compatibility_matrix
    from .plotting import heatmap_svg
    from .testbed import SweepContext

    sw = cfg["sweep"]
    unknown = [m for m in sw["methods"] if m not in METHODS]
    if unknown or not sw["methods"]:
        raise ConfigError(f"unknown or empty sweep methods {unknown}; choose from {sorted(METHODS)}")
    try:
        base = MethodConfig(**sw["base"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    out = _ensure_dir(args.out)
    seeds = _seed_list(cfg, args.seed)
    run = _run_hash("sweep", cfg.digest(), seeds)
    if _up_to_date(out, run):
        log.info("%s is up to date", out)
        return EXIT_OK
    field = _load_field(cfg)
    col = cfg["collect"]
    ctx = SweepContext(field, eval_seeds=tuple(seeds),
                       collect_seeds=tuple(range(col["start"], col["start"] + col["count"])),
                       collect_steps=col["steps"], teacher_count=sw["teacher_count"],
                       reference_steps=sw["reference_steps"])
    if cfg["schedule"]["profile"] is not None:
        ctx.profile = GeometryProfile.load(cfg["schedule"]["profile"])
    if cfg["schedule"]["params"]:
        from .schedules import BetaScheduleParams

        ctx.beta_params = BetaScheduleParams(*cfg["schedule"]["params"])
    matrix = compatibility_matrix(ctx, base, sw["methods"], sw["budget"], jobs=args.jobs)
    h = cfg.digest()
    seed_label = f"{seeds[0]}-{seeds[-1]}"
    labels = matrix.labels
    scores = matrix.scores()
    mat_rows = [[h, seed_label, a] + [float(v) for v in scores[i]] for i, a in enumerate(labels)]
    _write_atomic(os.path.join(out, "matrix.csv"), _csv_text(["config_hash", "seed", "method"] + labels, mat_rows))
    cell_rows = []
    for c in matrix.cells:
        cost = c.cost or {}
        cell_rows.append((h, seed_label, c.row, c.col, c.status, float(c.score),
                          cost.get("full_evaluations", ""), cost.get("block_evaluations", ""),
                          cost.get("operation_evaluations", ""), c.message))
    _write_atomic(os.path.join(out, "cells.csv"),
                  _csv_text(["config_hash", "seed", "row", "col", "status", "score", "full_evaluations",
                             "block_evaluations", "operation_evaluations", "message"], cell_rows))
    _write_atomic(os.path.join(out, "heatmap.svg"),
                  heatmap_svg(labels, scores, title=f"mean endpoint error, {sw['budget']} compute steps"))
    _write_manifest(out, run, "sweep", ["matrix.csv", "cells.csv", "heatmap.svg"], {"config_hash": h})
    return EXIT_OK


COMMANDS = {
    "gen-mixture": cmd_gen_mixture,
    "train-net": cmd_train_net,
    "collect": cmd_collect,
    "analyze": cmd_analyze,
    "schedule": cmd_schedule,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="flowaccel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-mixture", parents=[common], help="write a random Gaussian mixture")
    sub.add_parser("train-net", parents=[common], help="fit the toy residual network")
    sub.add_parser("collect", parents=[common], help="collect uniform-step trajectories")
    an = sub.add_parser("analyze", parents=[common], help="build a geometry profile")
    an.add_argument("input", help="trajectory directory")
    an.add_argument("--window", type=int, default=11)
    sc = sub.add_parser("schedule", parents=[common], help="write an outer schedule")
    sc.add_argument("--kind", choices=["uniform", "beta", "tors", "gits"])
    sc.add_argument("--N", type=int)
    sc.add_argument("--params", help="alpha,beta,p for the beta schedule")
    sc.add_argument("--profile", help="geometry profile for tors")
    sub.add_parser("sample", parents=[common], help="sample trajectories")
    ev = sub.add_parser("evaluate", parents=[common], help="compare trajectory sets")
    ev.add_argument("--target")
    ev.add_argument("--baseline")
    ev.add_argument("--reference")
    ev.add_argument("--mode", choices=["reference", "cross"], default="reference")
    sub.add_parser("sweep", parents=[common], help="pairwise compatibility matrix")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
