"""JSON run configuration with strict key checking."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

from .testbed import COLLECT_SEEDS, DEFAULT_MIXTURE, EVAL_SEEDS


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, bad values, or missing files."""


# section -> {key: default}; None marks an optional value with no default
SCHEMA = {
    "field": {"mixture": None, "net": None, "path": "rectified"},
    "mixture": dict(DEFAULT_MIXTURE),
    "schedule": {"kind": "uniform", "N": 10, "params": None, "file": None, "profile": None},
    "solver": {"kind": "euler", "order": 1},
    "cache": {"level": "velocity", "cycle": 1, "warmup": 0, "order": 1, "offsets": "index"},
    "seeds": {"start": EVAL_SEEDS.start, "count": 100},
    "collect": {"count": 100, "steps": 100, "start": COLLECT_SEEDS.start},
    "train": {"iterations": 2000, "batch_size": 256, "lr": 1e-3, "seed": 0,
              "checkpoint_every": 250, "n_validation": 512, "n_blocks": 4, "width": 128, "emb_dim": 32},
    "sweep": {"methods": ["uniform", "tors", "euler", "multistep-2"], "budget": 10,
              "base": {}, "reference_steps": 1000, "teacher_count": 64},
    "evaluate": {"target": None, "baseline": None, "reference": None, "grid": 101},
}
FILE_KEYS = {("field", "mixture"), ("field", "net"), ("schedule", "file"), ("schedule", "profile"),
             ("evaluate", "target"), ("evaluate", "baseline"), ("evaluate", "reference")}
BASE_KEYS = {"schedule", "solver", "level", "cycle", "warmup", "order"}


@dataclass
class RunConfig:
    data: dict
    source: str | None = None
    overrides: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def digest(self) -> str:
        """Short hash of the resolved configuration (file inputs by content)."""
        canon = copy.deepcopy(self.data)
        for sec, key in FILE_KEYS:
            p = canon[sec].get(key)
            if p is not None:
                canon[sec][key] = file_digest(p)
        blob = json.dumps(canon, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"


def file_digest(path) -> str:
    h = hashlib.sha256()
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if os.path.isfile(full):
                h.update(name.encode())
                h.update(file_digest(full).encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    base_dir = os.getcwd()
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base_dir = os.path.dirname(os.path.abspath(path))
    return build_config(raw, base_dir, overrides or {}, source=path)


def build_config(raw: dict, base_dir: str, overrides: dict | None = None, source=None) -> RunConfig:
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    data = {}
    for sec, defaults in SCHEMA.items():
        given = raw.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section {sec!r} must be an object")
        bad = set(given) - set(defaults)
        if bad:
            raise ConfigError(f"unknown key(s) in {sec!r}: {sorted(bad)}")
        data[sec] = {**copy.deepcopy(defaults), **copy.deepcopy(given)}
    for (sec, key), val in (overrides or {}).items():
        data[sec][key] = val
    for sec, key in FILE_KEYS:
        p = data[sec].get(key)
        if p is None:
            continue
        if not isinstance(p, str):
            raise ConfigError(f"{sec}.{key} must be a path string")
        full = p if os.path.isabs(p) else os.path.join(base_dir, p)
        if not os.path.exists(full):
            raise ConfigError(f"{sec}.{key}: file not found: {full}")
        data[sec][key] = os.path.normpath(full)
    bad_base = set(data["sweep"]["base"]) - BASE_KEYS
    if bad_base:
        raise ConfigError(f"unknown key(s) in sweep.base: {sorted(bad_base)}")
    for sec, key in (("seeds", "count"), ("collect", "count"), ("collect", "steps"), ("schedule", "N"),
                     ("sweep", "budget"), ("sweep", "reference_steps"), ("evaluate", "grid")):
        v = data[sec][key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{sec}.{key} must be a positive integer, got {v!r}")
    for sec, key in (("seeds", "start"), ("collect", "start")):
        v = data[sec][key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"{sec}.{key} must be a nonnegative integer, got {v!r}")
    return RunConfig(data, source, dict(overrides or {}))
