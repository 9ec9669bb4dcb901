"""Result tables persisted as CSV plus a mirroring JSON-lines file.

Every table has a fixed, versioned column list (``SCHEMAS``) and a key made of
the config hash and the table's key columns. Rows are only ever added or,
with ``force``, replaced under the same key. Files are rewritten in sorted key
order so identical inputs give byte-identical outputs regardless of the order
in which cells finished. Floats are written with ``repr`` (shortest
round-trip form); list cells are ``;``-joined.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable

import numpy as np

SCHEMA_VERSION = 1

_RECORD_COLS = ["method", "shift", "severity", "batch_size", "eps", "seed", "accuracy", "ece",
                "brier", "brier_per_class", "nll", "n", "num_bins", "n_batches", "last_batch",
                "temperature", "hist_counts", "hist_correct"]

SCHEMAS: dict[str, dict[str, list[str]]] = {
    "records": {
        "columns": ["config_hash"] + _RECORD_COLS,
        "key": ["method", "shift", "severity", "batch_size", "eps", "seed"],
    },
    "eps_sweep": {
        "columns": ["config_hash", "eps_multiplier"] + _RECORD_COLS,
        "key": ["method", "eps_multiplier", "batch_size", "seed"],
    },
    "discrepancy": {
        "columns": ["config_hash", "seed", "layer", "mode", "shift", "severity", "kl",
                    "brier", "accuracy"],
        "key": ["seed", "layer", "mode", "shift", "severity"],
    },
    "histograms": {
        "columns": ["config_hash", "seed", "layer", "source", "mode", "channel", "bin", "lo",
                    "hi", "count"],
        "key": ["seed", "layer", "source", "mode", "channel", "bin"],
    },
    "eigenspectra": {
        "columns": ["config_hash", "seed", "layer", "source", "mode", "rank", "eigenvalue"],
        "key": ["seed", "layer", "source", "mode", "rank"],
    },
    "confidence": {
        "columns": ["config_hash", "seed", "method", "shift", "severity", "batch_size", "bin",
                    "lo", "hi", "count", "correct"],
        "key": ["seed", "method", "shift", "severity", "batch_size", "bin"],
    },
}


def _plain(v: Any) -> Any:
    return v.item() if isinstance(v, np.generic) else v


def _sort_part(v: Any) -> tuple:
    v = _plain(v)
    if isinstance(v, (bool, int, float)):
        return (0, float(v), "")
    return (1, 0.0, str(v))


def _cell(v: Any) -> str:
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(_cell(x) for x in v)
    return str(v)


def write_csv(path: Path, columns: list[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def write_jsonl(path: Path, columns: list[str], rows: Iterable[dict]) -> None:
    lines = [json.dumps({c: _plain(r.get(c)) for c in columns}) for r in rows]
    path.write_text("".join(line + "\n" for line in lines))


class ResultStore:
    """All result tables of one output directory."""

    def __init__(self, out_dir: str | Path):
        self.out = Path(out_dir)
        self._rows: dict[str, dict[tuple, dict]] = {}

    def _key(self, table: str, row: dict) -> tuple:
        return (row["config_hash"],) + tuple(_sort_part(row[k]) for k in SCHEMAS[table]["key"])

    def _table(self, table: str) -> dict[tuple, dict]:
        if table not in SCHEMAS:
            raise KeyError(f"unknown table {table!r}")
        if table not in self._rows:
            rows: dict[tuple, dict] = {}
            path = self.out / f"{table}.jsonl"
            if path.exists():
                for line in path.read_text().splitlines():
                    if line.strip():
                        r = json.loads(line)
                        rows[self._key(table, r)] = r
            self._rows[table] = rows
        return self._rows[table]

    def rows(self, table: str, config_hash: str | None = None) -> list[dict]:
        t = self._table(table)
        return [t[k] for k in sorted(t) if config_hash is None or k[0] == config_hash]

    def has(self, table: str, config_hash: str, **key) -> bool:
        row = dict(key, config_hash=config_hash)
        return self._key(table, row) in self._table(table)

    def add(self, table: str, rows: Iterable[dict], force: bool = False) -> int:
        """Insert rows; existing keys are kept unless ``force``. Returns rows written."""
        t = self._table(table)
        cols = SCHEMAS[table]["columns"]
        added = 0
        for r in rows:
            missing = [c for c in cols if c not in r]
            if missing:
                raise KeyError(f"{table} row lacks columns {missing}")
            k = self._key(table, r)
            if k in t and not force:
                continue
            t[k] = {c: _plain(r[c]) for c in cols}
            added += 1
        return added

    def flush(self, table: str | None = None) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        for name in [table] if table else list(self._rows):
            cols = SCHEMAS[name]["columns"]
            rows = self.rows(name)
            write_csv(self.out / f"{name}.csv", cols, rows)
            write_jsonl(self.out / f"{name}.jsonl", cols, rows)
