"""``predbn`` command line.

Subcommands: train, eval, diagnose, sweep-eps, report. Exit codes: 0 success,
1 configuration error, 2 missing artifact, 3 numerical failure (NaN/Inf).
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings

from ..model import CheckpointError
from ..tensor import NonFiniteError
from .config import ConfigError, load_config
from .runner import (
    MissingArtifactError,
    cmd_diagnose,
    cmd_eval,
    cmd_report,
    cmd_sweep_eps,
    cmd_train,
)
from .store import ResultStore

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("train", "eval", "diagnose", "sweep-eps", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="predbn",
                                description="Prediction-time batch norm experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment YAML file")
        s.add_argument("--out", default=None, help="output directory (overrides 'out')")
        s.add_argument("--seed", type=int, default=None,
                       help="run a single seed (overrides 'seeds')")
        s.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        s.add_argument("--force", action="store_true",
                       help="recompute cells that already have results")
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    overrides = {"out": args.out, "seeds": [args.seed] if args.seed is not None else None}
    try:
        cfg = load_config(args.config, overrides)
        store = ResultStore(cfg.out)
        if args.command == "train":
            paths = cmd_train(cfg, force=args.force, workers=args.workers)
            print(f"{len(paths)} checkpoints under {cfg.checkpoints}")
        elif args.command == "eval":
            n = cmd_eval(cfg, store, force=args.force, workers=args.workers)
            print(f"{n} new records -> {cfg.out / 'records.csv'}")
        elif args.command == "diagnose":
            n = cmd_diagnose(cfg, store, force=args.force, workers=args.workers)
            print(f"{n} new diagnostic rows -> {cfg.out}")
        elif args.command == "sweep-eps":
            n = cmd_sweep_eps(cfg, store, force=args.force, workers=args.workers)
            print(f"{n} new eps rows -> {cfg.out / 'eps_sweep.csv'}")
        else:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                table = cmd_report(cfg, store)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
            print(f"{len(table)} summary rows -> {cfg.out / 'report.csv'}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, CheckpointError, FileNotFoundError) as err:
        print(f"missing artifact: {err}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
