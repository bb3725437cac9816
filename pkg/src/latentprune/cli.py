"""Command-line interface.

`run` executes the configured experiment, writes the report in the chosen
format plus a canonical JSON twin, and renders metric figures alongside;
`validate-config` checks a config file without running anything. Exit
codes: 0 success, 1 configuration error, 2 runtime or IO error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    canonical_path,
    load_config,
    run_experiment,
)

log = logging.getLogger("latentprune")


def _configure_logging() -> None:
    level_name = os.environ.get("LATENTPRUNE_LOG", "warning").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentprune",
        description="Noise optimization + token pruning experiments on the toy pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured experiment")
    run_p.add_argument("--config", required=True, help="path to the config file")
    run_p.add_argument("--mode", help="override run.mode")
    run_p.add_argument("--gamma", type=float, help="override prune.gamma")
    run_p.add_argument("--steps", type=int, help="override pipeline.num_steps")
    run_p.add_argument("--out", help="override run.out")
    run_p.add_argument("--format", choices=("json", "csv"), help="override run.format")
    run_p.add_argument("--reps", type=int, help="override run.repetitions")
    run_p.add_argument("--seed", type=int, help="override run.seed")
    run_p.add_argument(
        "--no-figures", action="store_true",
        help="skip rendering metric figures next to the report",
    )

    val_p = sub.add_parser("validate-config", help="check a config file and exit")
    val_p.add_argument("--config", required=True, help="path to the config file")
    return parser


def _apply_overrides(config, args) -> None:
    if args.mode is not None:
        config.run.mode = args.mode
    if args.gamma is not None:
        config.prune.gamma = args.gamma
    if args.steps is not None:
        config.pipeline.num_steps = args.steps
    if args.out is not None:
        config.run.out = args.out
    if args.format is not None:
        config.run.format = args.format
    if args.reps is not None:
        config.run.repetitions = args.reps
    if args.seed is not None:
        config.run.seed = args.seed
    config.validate()


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
        if args.command == "run":
            _apply_overrides(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if args.command == "validate-config":
        print(f"{args.config}: OK")
        return 0

    try:
        reports = run_experiment(config)
        out = config.run.out
        print(f"wrote {len(reports)} report(s) to {out}")
        print(f"canonical: {canonical_path(Path(out))}")
        if not args.no_figures:
            from .figures import render_report_figures

            for path in render_report_figures(reports, out):
                print(f"figure: {path}")
    except (OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
