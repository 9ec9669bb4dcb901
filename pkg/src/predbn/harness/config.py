"""Experiment configuration: YAML schema, validation and hashing.

Schema (version 1)::

    version: 1
    name: demo
    dataset: {kind: synthetic-tabular | synthetic-image | file, path: null,
              seed: null, params: {...}}
    model: {architecture: mlp, hidden: [128, 128], ...}   # ModelSpec fields
    train: {epochs: 20, lr: 0.001, ...}                   # TrainConfig fields
    methods:
      - {name: vanilla, bn_mode: eval_ema, ensemble_size: 1, batch_sizes: [500]}
    shifts: {kinds: [gaussian_noise], severities: [1, 2, 3, 4, 5], mixed: false}
    batch_sizes: [500]
    seeds: [0]
    eps_grid: [1, 10, 100, 1000]        # multipliers of the model's eps
    num_bins: 10
    diagnose: {layers: [penultimate], batch_size: 500, hist_bins: 50,
               hist_channels: 4, n_keep: 2048}
    out: results/demo
    checkpoints: null                   # defaults to <out>/checkpoints

``seed`` and ``input_shape``/``num_classes`` are filled in per run and from
the data, so they are not accepted under ``model`` or ``train``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..methods import MethodSpec
from ..model import ModelSpec, TrainConfig
from ..shift import ShiftKind, ShiftSpec

CONFIG_VERSION = 1
DATASET_KINDS = ("synthetic-tabular", "synthetic-image", "file")
TOP_KEYS = {"version", "name", "dataset", "model", "train", "methods", "shifts", "batch_sizes",
            "seeds", "eps_grid", "num_bins", "diagnose", "out", "checkpoints"}
DIAGNOSE_DEFAULTS = {"layers": ["penultimate"], "batch_size": 500, "hist_bins": 50,
                     "hist_channels": 4, "n_keep": 2048}
# fields that do not change any computed number
NON_SEMANTIC = ("name", "out", "checkpoints")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class MethodEntry:
    spec: MethodSpec
    batch_sizes: list[int] | None = None


@dataclass
class ExperimentConfig:
    raw: dict[str, Any]
    name: str
    dataset: dict[str, Any]
    model: dict[str, Any]
    train: dict[str, Any]
    methods: list[MethodEntry]
    shift_kinds: list[str]
    severities: list[float]
    mixed: bool
    batch_sizes: list[int]
    seeds: list[int]
    eps_grid: list[float]
    num_bins: int
    diagnose: dict[str, Any]
    out: Path
    checkpoints: Path
    config_hash: str = field(default="")

    def shift_specs(self, seed: int) -> list[ShiftSpec]:
        return [ShiftSpec(k, s, seed) for k in self.shift_kinds for s in self.severities]

    def method_batch_sizes(self, entry: MethodEntry) -> list[int]:
        return entry.batch_sizes if entry.batch_sizes is not None else self.batch_sizes

    def families(self) -> dict[tuple[str, str], int]:
        """(architecture, norm) -> largest ensemble size any method needs."""
        fams: dict[tuple[str, str], int] = {}
        for e in self.methods:
            key = self.family(e.spec)
            fams[key] = max(fams.get(key, 0), e.spec.ensemble_size)
        return fams

    def family(self, method: MethodSpec) -> tuple[str, str]:
        return (method.architecture or self.model["architecture"], method.norm or self.model["norm"])


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _nonempty_list(raw: dict, key: str, default=None) -> list:
    value = raw.get(key, default)
    _require(isinstance(value, list) and len(value) > 0, f"'{key}' must be a non-empty list")
    return value


def semantic_hash(raw: dict) -> str:
    """sha256 over the canonical JSON of every field that affects results."""
    payload = {k: v for k, v in raw.items() if k not in NON_SEMANTIC}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _check_fields(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    _require(not unknown, f"unknown {where} fields: {sorted(unknown)}")


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config mapping and fill in defaults."""
    _require(isinstance(raw, dict), "config must be a mapping")
    raw = copy.deepcopy(raw)
    _check_fields(raw, TOP_KEYS, "top-level")
    _require(raw.get("version") == CONFIG_VERSION,
             f"config version must be {CONFIG_VERSION}, got {raw.get('version')!r}")
    base_dir = base_dir or Path.cwd()

    ds = dict(raw.get("dataset") or {})
    _check_fields(ds, {"kind", "path", "seed", "params"}, "dataset")
    _require(ds.get("kind") in DATASET_KINDS, f"dataset.kind must be one of {DATASET_KINDS}")
    ds.setdefault("params", {})
    ds.setdefault("seed", None)
    if ds["kind"] == "file":
        _require(bool(ds.get("path")), "dataset.path is required for kind 'file'")
        path = Path(ds["path"])
        if not path.is_absolute():
            path = base_dir / path
        _require(path.is_file(), f"dataset file not found: {path}")
        ds["path"] = str(path)

    model = dict(raw.get("model") or {})
    _require("seed" not in model and "input_shape" not in model and "num_classes" not in model,
             "model.seed/input_shape/num_classes are set per run, not in the config")
    model_fields = set(ModelSpec.__dataclass_fields__) - {"seed", "input_shape", "num_classes"}
    _check_fields(model, model_fields, "model")
    defaults = ModelSpec()
    model.setdefault("architecture", defaults.architecture)
    model.setdefault("norm", defaults.norm)

    train = dict(raw.get("train") or {})
    _require("seed" not in train, "train.seed is set per run, not in the config")
    _check_fields(train, set(TrainConfig.__dataclass_fields__) - {"seed"}, "train")
    try:
        TrainConfig(**train)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid train section: {err}") from err

    methods = []
    names = set()
    for m in _nonempty_list(raw, "methods"):
        _require(isinstance(m, dict), "each method must be a mapping")
        m = dict(m)
        sizes = m.pop("batch_sizes", None)
        try:
            spec = MethodSpec(**m)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"invalid method {m.get('name')!r}: {err}") from err
        _require(spec.name not in names, f"duplicate method name {spec.name!r}")
        names.add(spec.name)
        if sizes is not None:
            _require(isinstance(sizes, list) and sizes and all(int(t) >= 1 for t in sizes),
                     f"method {spec.name!r}: batch_sizes must be a non-empty list of ints >= 1")
            sizes = [int(t) for t in sizes]
        methods.append(MethodEntry(spec, sizes))

    shifts = dict(raw.get("shifts") or {})
    _check_fields(shifts, {"kinds", "severities", "mixed"}, "shifts")
    kinds = _nonempty_list(shifts, "kinds")
    severities = _nonempty_list(shifts, "severities")
    for k in kinds:
        try:
            ShiftKind(k)
        except ValueError as err:
            raise ConfigError(f"unknown shift kind {k!r}") from err
        for s in severities:
            try:
                ShiftSpec(k, s)
            except ValueError as err:
                raise ConfigError(str(err)) from err
    mixed = bool(shifts.get("mixed", False))
    _require(not mixed or len(kinds) > 1, "mixed shifts need at least two kinds")

    batch_sizes = [int(t) for t in _nonempty_list(raw, "batch_sizes", [500])]
    _require(all(t >= 1 for t in batch_sizes), "batch sizes must be >= 1")
    seeds = [int(s) for s in _nonempty_list(raw, "seeds", [0])]
    _require(len(set(seeds)) == len(seeds), "seeds must be distinct")
    eps_grid = [float(e) for e in _nonempty_list(raw, "eps_grid", [1, 10, 100, 1000])]
    _require(all(e > 0 for e in eps_grid), "eps multipliers must be > 0")
    num_bins = int(raw.get("num_bins", 10))
    _require(num_bins >= 1, "num_bins must be >= 1")

    diag = dict(DIAGNOSE_DEFAULTS)
    user_diag = raw.get("diagnose") or {}
    _check_fields(user_diag, set(DIAGNOSE_DEFAULTS), "diagnose")
    diag.update(user_diag)

    out = Path(raw.get("out") or f"results/{raw.get('name', 'experiment')}")
    ckpt = Path(raw["checkpoints"]) if raw.get("checkpoints") else out / "checkpoints"

    cfg = ExperimentConfig(
        raw=raw, name=str(raw.get("name", "experiment")), dataset=ds, model=model, train=train,
        methods=methods, shift_kinds=[ShiftKind(k).value for k in kinds],
        severities=severities, mixed=mixed, batch_sizes=batch_sizes, seeds=seeds,
        eps_grid=eps_grid, num_bins=num_bins, diagnose=diag, out=out, checkpoints=ckpt,
    )
    cfg.config_hash = semantic_hash(raw)
    return cfg


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a YAML config; ``overrides`` replace top-level fields (CLI flags)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    return parse_config(raw, base_dir=path.parent)
