"""Command-line entry point for the experiment harness."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import harness
from .checks import run_gradcheck

_EXPERIMENT_COMMANDS = ("train", "gradprofile", "noise-sweep", "alpha-sweep",
                        "ablation", "pipeline-sim", "speedup")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deinforeg",
        description="Decoupled supervised learning experiments: training, "
                    "gradient profiles, noise/alpha sweeps, loss ablations, "
                    "pipeline simulation and timing.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _EXPERIMENT_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", default=None, help="JSON experiment config")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="run a single seed instead of the config's list")
        p.add_argument("--workers", type=int, default=None,
                       help="override the worker count")
    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seeds", type=int, default=20, help="number of random seeds")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            ok, lines = run_gradcheck(args.seeds)
            for line in lines:
                print(line)
            if not ok:
                print("gradcheck: FAILED", file=sys.stderr)
                return 1
            print("gradcheck: all ops and losses pass")
            return 0

        if args.config:
            cfg = harness.ExperimentConfig.load(args.config)
            if cfg.kind != args.command:
                raise harness.ConfigError(
                    f"config kind {cfg.kind!r} does not match command {args.command!r}")
        else:
            cfg = harness.ExperimentConfig(kind=args.command)
        if args.seed is not None:
            cfg = replace(cfg, seeds=(args.seed,))
        if args.workers is not None:
            cfg = replace(cfg, workers=args.workers,
                          worker_grid=tuple(sorted({1, args.workers})))
        summary = harness.run(cfg, args.out)
        for group, metric, mean, std, n in summary.rows:
            print(f"{group:<28} {metric:<24} {mean:.6g} +- {std:.6g} (n={n})")
        return 0
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"deinforeg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
