"""Command-line entry point.

    solver <task> --config <path> [--seed S] [--threads K] [--deterministic]
                  [--out DIR]

Tasks: simulate, solve, solve-obstacle, oracle, normcheck, compare.  The
task on the command line must match the config's task field.  Exit codes:
0 success, 1 error, 2 criterion failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import TASKS, validate_config
from .errors import SolverError
from .runner import EXIT_ERROR, run_experiment

__all__ = ["main", "build_parser"]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="solver",
        description="PIDE / obstacle-problem solver: declarative experiment runner.")
    sub = parser.add_subparsers(dest="task", required=True, metavar="task")
    for task in TASKS:
        p = sub.add_parser(task, help=f"run a {task} experiment")
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed")
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("SOLVER_THREADS", "1")),
                       help="worker threads (echoed into the report; "
                            "SOLVER_THREADS is the fallback)")
        p.add_argument("--deterministic", action="store_true", default=True,
                       help="fixed-order reductions for bit-reproducible reports "
                            "(always on in this implementation)")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = validate_config(raw)
        if cfg.task != args.task:
            print(f"error: config task {cfg.task!r} does not match "
                  f"command {args.task!r}", file=sys.stderr)
            return EXIT_ERROR
        report, code = run_experiment(
            cfg, out_dir=args.out,
            flags={"threads": args.threads, "deterministic": args.deterministic})
    except SolverError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out_path = os.path.join(report.meta["out_dir"], "report.json")
    print(f"report: {out_path}")
    for key, val in report.body.get("headline", {}).items():
        print(f"  {key}: {val}")
    for crit in report.body.get("criteria", []):
        mark = "PASS" if crit["passed"] else "FAIL"
        print(f"  [{mark}] {crit['name']}: {crit['value']:.6g} "
              f"(threshold {crit['threshold']:.6g})")
    if report.body.get("status") == "error":
        err = report.body["error"]
        print(f"error [{err['code']}]: {err['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
