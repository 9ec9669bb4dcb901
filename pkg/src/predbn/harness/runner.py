"""Experiment commands: train, eval, diagnose, sweep-eps and report.

Grid cells are independent jobs. With ``workers > 1`` they run in a process
pool; results are collected in submission order and written by this process
alone, so the output files do not depend on scheduling.
"""
from __future__ import annotations

import datetime as _dt
import functools
import hashlib
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .. import __version__
from .._kernels import BACKEND
from ..data import Dataset, Splits, make_images, make_tabular
from ..diagnostics import covariance_eigenspectrum, gaussian_kl_discrepancy, histogram_dump
from ..methods import MethodSpec, evaluate_method, fit_method_temperature
from ..metrics import HIST_BINS
from ..model import Checkpoint, ModelSpec, TrainConfig, capture_activations, train
from ..normalization import Mode
from ..shift import ShiftSpec, build_mixed_split, build_split
from .config import ExperimentConfig
from .store import SCHEMA_VERSION, ResultStore, write_csv

logger = logging.getLogger(__name__)

MEMBER_SEED_STRIDE = 1000
DIAGNOSE_MODES = (Mode.EVAL_EMA, Mode.EVAL_BATCH)
REPORT_METRICS = ("accuracy", "ece", "brier", "nll")
REPORT_COLUMNS = ["method", "severity", "batch_size", "metric", "n", "min", "q1", "median",
                  "q3", "max"]


class MissingArtifactError(LookupError):
    """An upstream artifact (usually a checkpoint) does not exist yet."""


def member_seed(seed: int, member: int) -> int:
    return seed * MEMBER_SEED_STRIDE + member


# -- data -------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _splits_cached(dataset_json: str, seed: int) -> Splits:
    ds = json.loads(dataset_json)
    kind = ds["kind"]
    data_seed = seed if ds.get("seed") is None else int(ds["seed"])
    params = ds.get("params") or {}
    if kind == "synthetic-tabular":
        return make_tabular(seed=data_seed, **params)
    if kind == "synthetic-image":
        return make_images(seed=data_seed, **params)
    arrays = np.load(ds["path"])
    missing = [k for k in ("X_train", "y_train", "X_val", "y_val", "X_test", "y_test")
               if k not in arrays]
    if missing:
        raise MissingArtifactError(f"{ds['path']} lacks arrays {missing}")
    meta = {"source": ds["path"]}
    return Splits(*(Dataset(arrays[f"X_{s}"], arrays[f"y_{s}"], dict(meta))
                    for s in ("train", "val", "test")))


def load_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    return _splits_cached(json.dumps(cfg.dataset, sort_keys=True), seed)


def shifted_splits(cfg: ExperimentConfig, seed: int) -> list[tuple[str, Any, Dataset]]:
    """Every (shift name, severity, split) of the grid, in config order."""
    data = load_splits(cfg, seed)
    out, seen = [], set()
    for spec in cfg.shift_specs(seed):
        key = (spec.kind.value, spec.severity)
        if key in seen:
            continue
        seen.add(key)
        out.append((spec.kind.value, spec.severity, build_split(data.test, spec, data.train.X)))
    if cfg.mixed:
        for s in cfg.severities:
            parts = [build_split(data.test, ShiftSpec(k, s, seed), data.train.X)
                     for k in cfg.shift_kinds]
            out.append(("mixed", s, build_mixed_split(parts, seed)))
    return out


# -- checkpoints ------------------------------------------------------------

def _family_hash(cfg: ExperimentConfig, family: tuple[str, str]) -> str:
    payload = {"dataset": cfg.dataset, "model": dict(cfg.model, architecture=family[0],
                                                      norm=family[1]),
               "train": cfg.train}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def checkpoint_path(cfg: ExperimentConfig, family: tuple[str, str], seed: int, member: int) -> Path:
    tag = f"{family[0]}-{family[1]}-{_family_hash(cfg, family)}"
    return cfg.checkpoints / tag / f"seed{seed}" / f"member{member}.ckpt"


def build_model_spec(cfg: ExperimentConfig, family: tuple[str, str], data: Splits,
                     seed: int) -> ModelSpec:
    fields = dict(cfg.model, architecture=family[0], norm=family[1])
    fields["input_shape"] = tuple(data.train.X.shape[1:])
    n_classes = int(max(data.train.y.max(), data.val.y.max(), data.test.y.max())) + 1
    fields["num_classes"] = int(cfg.dataset["params"].get("n_classes", n_classes))
    fields["seed"] = seed
    return ModelSpec(**fields)


def load_members(cfg: ExperimentConfig, method: MethodSpec, seed: int) -> list[Checkpoint]:
    family = cfg.family(method)
    members = []
    for m in range(method.ensemble_size):
        path = checkpoint_path(cfg, family, seed, m)
        if not path.exists():
            raise MissingArtifactError(f"missing checkpoint {path}; run 'predbn train' first")
        members.append(Checkpoint.load(path))
    return members


# -- dispatch ---------------------------------------------------------------

def _run_jobs(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _stamp(cfg: ExperimentConfig, command: str, started: str) -> None:
    """Record run metadata; the only place wall-clock time is written."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "run_meta.json"
    meta = json.loads(path.read_text()) if path.exists() else {}
    meta.update({"schema_version": SCHEMA_VERSION, "code_version": __version__,
                 "kernel_backend": BACKEND, "config_hash": cfg.config_hash,
                 "config_name": cfg.name})
    meta.setdefault("commands", {})[command] = {
        "started": started, "finished": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (cfg.out / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


# -- train ------------------------------------------------------------------

def _train_job(job) -> str:
    cfg, family, seed, member = job
    data = load_splits(cfg, seed)
    s = member_seed(seed, member)
    spec = build_model_spec(cfg, family, data, s)
    ckpt = train(spec, TrainConfig(**cfg.train, seed=s), data.train)
    path = checkpoint_path(cfg, family, seed, member)
    ckpt.save(path)
    return str(path)


def cmd_train(cfg: ExperimentConfig, force: bool = False, workers: int = 1) -> list[Path]:
    """Train every checkpoint the method list needs; existing ones are kept."""
    started = _now()
    jobs, paths = [], []
    for family, size in cfg.families().items():
        for seed in cfg.seeds:
            for m in range(size):
                path = checkpoint_path(cfg, family, seed, m)
                paths.append(path)
                if force or not path.exists():
                    jobs.append((cfg, family, seed, m))
    logger.info("training %d of %d checkpoints", len(jobs), len(paths))
    _run_jobs(_train_job, jobs, workers)
    _stamp(cfg, "train", started)
    return paths


# -- eval -------------------------------------------------------------------

def _record_row(cfg: ExperimentConfig, rec) -> dict:
    row = rec.to_dict()
    row["config_hash"] = cfg.config_hash
    return row


def _eval_job(job) -> list[dict]:
    cfg, entry_idx, seed, t, wanted = job
    method = cfg.methods[entry_idx].spec
    members = load_members(cfg, method, seed)
    data = load_splits(cfg, seed)
    temperature = 1.0
    if method.temperature:
        temperature = fit_method_temperature(method, members, data.val, t)
    rows = []
    for shift, severity, split in shifted_splits(cfg, seed):
        if (shift, severity) not in wanted:
            continue
        rec = evaluate_method(method, members, split, t, temperature, shift=shift,
                              severity=severity, seed=seed, num_bins=cfg.num_bins)
        rows.append(_record_row(cfg, rec))
    return rows


def _default_eps(cfg: ExperimentConfig, method: MethodSpec) -> float:
    return float(method.eps if method.eps is not None else cfg.model.get("eps", ModelSpec().eps))


def _grid_cells(cfg: ExperimentConfig) -> list[tuple[str, Any]]:
    cells, seen = [], set()
    for k in cfg.shift_kinds:
        for s in cfg.severities:
            sev = ShiftSpec(k, s).severity
            if (k, sev) not in seen:
                seen.add((k, sev))
                cells.append((k, sev))
    if cfg.mixed:
        cells.extend(("mixed", s) for s in cfg.severities)
    return cells


def cmd_eval(cfg: ExperimentConfig, store: ResultStore | None = None, force: bool = False,
             workers: int = 1) -> int:
    """Evaluate the method x shift x severity x batch-size x seed grid. Returns new rows."""
    started = _now()
    store = store or ResultStore(cfg.out)
    jobs = []
    for seed in cfg.seeds:
        for i, entry in enumerate(cfg.methods):
            for m in range(entry.spec.ensemble_size):
                path = checkpoint_path(cfg, cfg.family(entry.spec), seed, m)
                if not path.exists():
                    raise MissingArtifactError(f"missing checkpoint {path}; run 'predbn train' first")
            eps = _default_eps(cfg, entry.spec)
            for t in cfg.method_batch_sizes(entry):
                wanted = {c for c in _grid_cells(cfg)
                          if force or not store.has("records", cfg.config_hash,
                                                    method=entry.spec.name, shift=c[0],
                                                    severity=c[1], batch_size=t, eps=eps,
                                                    seed=seed)}
                if wanted:
                    jobs.append((cfg, i, seed, t, frozenset(wanted)))
    added = 0
    for rows in _run_jobs(_eval_job, jobs, workers):
        added += store.add("records", rows, force=force)
    store.flush("records")
    _stamp(cfg, "eval", started)
    return added


# -- sweep-eps --------------------------------------------------------------

def _sweep_job(job) -> list[dict]:
    cfg, entry_idx, seed, t, mults = job
    base = cfg.methods[entry_idx].spec
    data = load_splits(cfg, seed)
    members = load_members(cfg, base, seed)
    eps0 = _default_eps(cfg, base)
    rows = []
    for mult in mults:
        method = replace(base, eps=eps0 * mult)
        temperature = 1.0
        if method.temperature:
            temperature = fit_method_temperature(method, members, data.val, t)
        rec = evaluate_method(method, members, data.test, t, temperature, shift="identity",
                              severity=0, seed=seed, num_bins=cfg.num_bins)
        row = _record_row(cfg, rec)
        row["eps_multiplier"] = float(mult)
        rows.append(row)
    return rows


def cmd_sweep_eps(cfg: ExperimentConfig, store: ResultStore | None = None, force: bool = False,
                  workers: int = 1) -> int:
    """Prediction-time eps grid on the unshifted test set for every method."""
    started = _now()
    store = store or ResultStore(cfg.out)
    jobs = []
    for seed in cfg.seeds:
        for i, entry in enumerate(cfg.methods):
            load_members(cfg, entry.spec, seed)  # fail early when checkpoints are missing
            for t in cfg.method_batch_sizes(entry):
                mults = [m for m in cfg.eps_grid
                         if force or not store.has("eps_sweep", cfg.config_hash,
                                                   method=entry.spec.name, eps_multiplier=m,
                                                   batch_size=t, seed=seed)]
                if mults:
                    jobs.append((cfg, i, seed, t, tuple(mults)))
    added = 0
    for rows in _run_jobs(_sweep_job, jobs, workers):
        added += store.add("eps_sweep", rows, force=force)
    store.flush("eps_sweep")
    _stamp(cfg, "sweep-eps", started)
    return added


# -- diagnose ---------------------------------------------------------------

def _diagnose_job(job) -> dict[str, list[dict]]:
    cfg, seed = job
    diag = cfg.diagnose
    family = (cfg.model["architecture"], cfg.model["norm"])
    path = checkpoint_path(cfg, family, seed, 0)
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint {path}; run 'predbn train' first")
    ckpt = Checkpoint.load(path)
    data = load_splits(cfg, seed)
    layers = diag["layers"]
    layers = "all" if layers == "all" else list(layers)
    t = int(diag["batch_size"])
    n_keep = int(diag["n_keep"])
    splits = shifted_splits(cfg, seed)
    top = max(float(ShiftSpec(k, s).severity) for k in cfg.shift_kinds for s in cfg.severities)
    h = cfg.config_hash
    out: dict[str, list[dict]] = {"discrepancy": [], "histograms": [], "eigenspectra": [],
                                  "confidence": []}
    for mode in DIAGNOSE_MODES:
        ref = capture_activations(ckpt, data.train.X, mode, layers, batch_size=t, n_keep=n_keep,
                                  seed=seed, source="train")
        method = MethodSpec(f"single-{mode.value}", bn_mode=mode)
        top_summaries: dict[str, list] = {s.layer: [s] for s in ref}
        for shift, severity, split in splits:
            summ = capture_activations(ckpt, split.X, mode, layers, batch_size=t, n_keep=n_keep,
                                       seed=seed, source=f"{shift}-{severity}")
            rec = evaluate_method(method, [ckpt], split, t, shift=shift, severity=severity,
                                  seed=seed, num_bins=cfg.num_bins)
            for r, s in zip(ref, summ):
                out["discrepancy"].append({
                    "config_hash": h, "seed": seed, "layer": s.layer, "mode": mode.value,
                    "shift": shift, "severity": severity,
                    "kl": gaussian_kl_discrepancy(r, s), "brier": rec.brier,
                    "accuracy": rec.accuracy})
            if float(severity) == top:
                for s in summ:
                    top_summaries[s.layer].append(s)
                counts, correct = rec.hist_counts, rec.hist_correct
                for b in range(HIST_BINS):
                    out["confidence"].append({
                        "config_hash": h, "seed": seed, "method": method.name, "shift": shift,
                        "severity": severity, "batch_size": t, "bin": b, "lo": b / HIST_BINS,
                        "hi": (b + 1) / HIST_BINS, "count": counts[b],
                        "correct": correct[b]})
        for layer, summaries in top_summaries.items():
            chans = range(min(int(diag["hist_channels"]), summaries[0].channels))
            for row in histogram_dump(summaries, chans, bins=int(diag["hist_bins"])):
                row.update(config_hash=h, seed=seed)
                out["histograms"].append(row)
            for s in summaries:
                if s.cov is None:
                    continue
                for rank, value in enumerate(covariance_eigenspectrum(s)):
                    out["eigenspectra"].append({
                        "config_hash": h, "seed": seed, "layer": layer, "source": s.source,
                        "mode": mode.value, "rank": rank, "eigenvalue": float(value)})
    return out


def cmd_diagnose(cfg: ExperimentConfig, store: ResultStore | None = None, force: bool = False,
                 workers: int = 1) -> int:
    """Discrepancy, histogram, eigenspectrum and confidence-histogram tables."""
    started = _now()
    store = store or ResultStore(cfg.out)
    jobs = []
    for seed in cfg.seeds:
        done = any(r["seed"] == seed for r in store.rows("discrepancy", cfg.config_hash))
        if force or not done:
            jobs.append((cfg, seed))
    added = 0
    for tables in _run_jobs(_diagnose_job, jobs, workers):
        for name, rows in tables.items():
            added += store.add(name, rows, force=force)
    for name in ("discrepancy", "histograms", "eigenspectra", "confidence"):
        store.flush(name)
    _stamp(cfg, "diagnose", started)
    return added


# -- report -----------------------------------------------------------------

def summarize_records(rows: Iterable[dict]) -> list[dict]:
    """Min / quartiles / median / max of each metric per (method, severity, batch size)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], float(r["severity"]), int(r["batch_size"])), []).append(r)
    table = []
    for (method, severity, t) in sorted(groups):
        members = groups[(method, severity, t)]
        for metric in REPORT_METRICS:
            v = np.array([float(r[metric]) for r in members])
            q = np.percentile(v, [0, 25, 50, 75, 100])
            table.append({"method": method, "severity": severity, "batch_size": t,
                          "metric": metric, "n": len(v), "min": float(q[0]), "q1": float(q[1]),
                          "median": float(q[2]), "q3": float(q[3]), "max": float(q[4])})
    return table


def cmd_report(cfg: ExperimentConfig, store: ResultStore | None = None) -> list[dict]:
    """Write ``report.csv`` and ``report.json`` from the records of this config."""
    started = _now()
    store = store or ResultStore(cfg.out)
    rows = store.rows("records", cfg.config_hash)
    if not rows:
        warnings.warn(f"no records for config {cfg.config_hash[:12]} in {cfg.out}; "
                      "writing empty report", RuntimeWarning, stacklevel=2)
    table = summarize_records(rows)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "report.csv", REPORT_COLUMNS, table)
    (cfg.out / "report.json").write_text(json.dumps(
        {"config_hash": cfg.config_hash, "schema_version": SCHEMA_VERSION, "rows": table},
        indent=2, sort_keys=True) + "\n")
    _stamp(cfg, "report", started)
    return table
