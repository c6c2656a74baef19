"""Command-line experiment runner.

    sgfusion run --config exp.yaml [--seed N] [--out DIR] [--algorithms a,b] [--quiet]
    sgfusion gen-world | build-hrg | train | report --config exp.yaml [...]
    sgfusion validate [--out DIR] [--metric TAG]

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from sgfusion.cli.config import ExperimentConfig, load_config, parse_config, with_overrides
from sgfusion.cli.pipeline import STAGES, run_experiment, validate_artifacts
from sgfusion.errors import ConfigError, SgfusionError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

__all__ = ["ExperimentConfig", "load_config", "main", "parse_config", "run_experiment"]


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, metavar="PATH", help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, metavar="N", help="override the master seed")
    p.add_argument("--out", default=None, metavar="DIR", help="override output_dir")
    p.add_argument("--algorithms", default=None, metavar="LIST", help="comma-separated algorithm tags")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgfusion", description="Zone federated learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="run every stage"))
    for name in STAGES:
        _add_common(sub.add_parser(name, help=f"run the {name} stage only"))
    v = sub.add_parser("validate", help="re-check saved dendrogram artifacts")
    v.add_argument("--out", default=".", metavar="DIR")
    v.add_argument("--metric", default="euclidean")
    v.add_argument("--quiet", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which already matches EXIT_CONFIG
        return int(exc.code or 0)

    def log(msg: str) -> None:
        if not args.quiet:
            print(msg, file=sys.stderr)

    try:
        if args.command == "validate":
            checked = validate_artifacts(args.out, args.metric)
            log(f"ok: {', '.join(checked)}")
            return EXIT_OK
        cfg = with_overrides(load_config(args.config), args.seed, args.out, args.algorithms)
        if args.command == "run":
            run_experiment(cfg, cfg.output_dir, log)
        else:
            STAGES[args.command](cfg, cfg.output_dir, log)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SgfusionError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
