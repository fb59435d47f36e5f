"""Batch pipeline driver.

Each subcommand reads earlier artifacts from the workspace, verifies they
belong to the current configuration, and writes its own.  Exit codes:
0 success, 1 usage error, 2 data/artifact error, 3 acceptance violation
(an attack past its bound).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import BoundViolationError, DataError
from .pipeline import (Workspace, merge_config, stage_attack, stage_bounds,
                       stage_defend, stage_ingest, stage_pareto,
                       stage_patterns, stage_report, stage_safetimes,
                       stage_sets, stage_simulate, stage_synth, stage_tam)
from .tamaraw import TamarawParams

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VIOLATION = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the pipeline reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptive-tamaraw",
                     description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--workspace", required=True, type=Path,
                        help="artifact directory for this run")
    parser.add_argument("--config", type=Path,
                        help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for stage-internal parallelism; "
                        "stages are pure so results do not depend on it")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate the synthetic corpus + manifest")
    p = sub.add_parser("ingest", help="build a manifest from trace files")
    p.add_argument("--data-dir", type=Path)
    sub.add_parser("tam", help="compute count matrices for every trace")

    p = sub.add_parser("defend", help="pure constant-rate padding")
    p.add_argument("--rho-out", type=float)
    p.add_argument("--rho-in", type=float)
    p.add_argument("--bucket-size", type=int)
    p.add_argument("--site", type=int)
    p.add_argument("--instance", type=int)

    sub.add_parser("pareto", help="grid sweep + Pareto frontier")
    sub.add_parser("patterns", help="mine per-site patterns (train split)")
    sub.add_parser("sets", help="build anonymity sets + local parameters")
    sub.add_parser("safetimes", help="train detector + safe switch times")
    sub.add_parser("simulate", help="adaptive defense on the test split")
    sub.add_parser("bounds", help="attacker-success bound sweep")
    sub.add_parser("attack", help="closed-world attacker vs the bound")
    sub.add_parser("report", help="join artifacts into plot-ready tables")
    return parser


def load_config(args: argparse.Namespace) -> dict:
    overrides = None
    if args.config is not None:
        if not args.config.exists():
            raise DataError(f"config file {args.config} does not exist")
        overrides = json.loads(args.config.read_text())
    config = merge_config(overrides)
    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "threads", 1) < 1:
        raise DataError("--threads must be >= 1")
    return config


def _defend_params(ws: Workspace, args: argparse.Namespace) -> TamarawParams:
    grid = ws.config["grid"]
    return TamarawParams(
        rho_out=args.rho_out if args.rho_out is not None else grid["rho_out"],
        rho_in=args.rho_in if args.rho_in is not None else grid["rho_in"],
        bucket_size=(args.bucket_size if args.bucket_size is not None
                     else grid["bucket_sizes"][0]))


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    ws = Workspace(args.workspace, config)
    command = args.command
    if command == "synth":
        out = stage_synth(ws)
    elif command == "ingest":
        out = stage_ingest(ws, args.data_dir)
    elif command == "tam":
        out = stage_tam(ws)
    elif command == "defend":
        if (args.site is None) != (args.instance is None):
            raise DataError("--site and --instance go together")
        out = stage_defend(ws, _defend_params(ws, args), args.site,
                           args.instance)
    elif command == "pareto":
        out = stage_pareto(ws)
    elif command == "patterns":
        out = stage_patterns(ws)
    elif command == "sets":
        out = stage_sets(ws)
    elif command == "safetimes":
        out = stage_safetimes(ws)
    elif command == "simulate":
        out = stage_simulate(ws)
    elif command == "bounds":
        out = stage_bounds(ws)
    elif command == "attack":
        out = stage_attack(ws)
    elif command == "report":
        out = stage_report(ws)
    else:  # pragma: no cover - argparse enforces the choices
        raise DataError(f"unknown command {command!r}")
    paths = out if isinstance(out, list) else [out]
    for path in paths:
        print(path)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return run(args)
    except BoundViolationError as exc:
        print(f"acceptance violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
