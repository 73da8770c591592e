"""Command-line entry points.

gflow run --config path [--seed N] [--out DIR]
    Train per the config file; one metrics CSV and one parameter checkpoint
    per seed land in the output directory.

gflow summarize files... [--window W]
    Mean and sample std of each metric across runs at the final iteration,
    smoothed by a trailing window (default 10).
"""

import argparse
import sys

from .errors import GflowError
from .runner import METRIC_NAMES, parse_config, run, summarize


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gflow",
        description="Train samplers over DAG state spaces and evaluate them exactly.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a training config")
    p_run.add_argument("--config", required=True, help="key = value config file")
    p_run.add_argument("--seed", type=int, default=None,
                       help="run only this seed instead of the config's list")
    p_run.add_argument("--out", default=None,
                       help="output directory (overrides the config)")

    p_sum = sub.add_parser("summarize", help="aggregate metrics CSVs")
    p_sum.add_argument("files", nargs="+", help="metrics CSV files")
    p_sum.add_argument("--window", type=int, default=10,
                       help="trailing smoothing window (1 = none)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            for path in run(cfg, seed=args.seed, out=args.out):
                print(path)
        else:
            table = summarize(args.files, window=args.window)
            print(f"final iteration: {table['iter']}  (files: {len(args.files)})")
            print(f"{'metric':<10}{'mean':>14}{'std':>14}")
            for name in METRIC_NAMES:
                mean, std = table[name]
                print(f"{name:<10}{mean:>14.6g}{std:>14.6g}")
    except GflowError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0
