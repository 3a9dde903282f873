"""Command-line entry point: ``boxeki run <config> [--seed N] [--out DIR] ...``.

Exit status: 0 success, 2 invalid config, 3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from boxeki.experiments import (
    ConfigError,
    SolverFailure,
    format_table,
    load_config,
    resolve_config,
    run_experiment,
)
from boxeki.forward import ForwardSolveError
from boxeki.oracle import ConvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def _methods(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    if not names:
        raise argparse.ArgumentTypeError("empty method list")
    return names


def build_parser():
    p = argparse.ArgumentParser(prog="boxeki", description="Box-constrained ensemble Kalman inversion experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", help="JSON config file (bundled ones live in boxeki/configs)")
    run.add_argument("--seed", type=int, help="override method.seed")
    run.add_argument("--out", help="override output.dir")
    run.add_argument("--methods", type=_methods, help="comma-separated method list")
    run.add_argument("--t-end", type=float, dest="t_end", help="override integration.t_end")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(
            load_config(args.config), seed=args.seed, out_dir=args.out, methods=args.methods, t_end=args.t_end
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(format_table(exc.summary["comparison"]))
        print(f"solver failure: {exc} (partial outputs in {cfg['output']['dir']})", file=sys.stderr)
        return EXIT_SOLVER
    except (ConvergenceError, ForwardSolveError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(format_table(summary["comparison"]))
    flag = summary["comparison"]["transformed_cost_gap_below_projected"]
    if flag is not None:
        print(f"transformed cost_gap below projected: {flag}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
