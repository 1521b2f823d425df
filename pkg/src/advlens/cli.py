"""Command-line entry point: one subcommand per experiment kind."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .data import DataError
from .harness import load_config, run_experiment
from .models import ConfigError

SUBCOMMANDS = {
    "train": "train",
    "advtrain": "advtrain",
    "attack": "attack",
    "transfer": "transfer",
    "freq-study": "freq_study",
    "certify": "certify",
    "sweep": "sweep",
    "features": "feature_dump",
}

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advlens", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind} experiment")
        p.add_argument("--config", help="JSON experiment config; flags below override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--samples", type=int, help="evaluation subset size")
        p.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
        p.add_argument("--model", action="append", metavar="CKPT",
                       help="checkpoint to evaluate; repeat for several models")
        p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "out": args.out, "samples": args.samples,
                 "workers": args.workers}
    if args.model:
        overrides["models"] = [{"checkpoint": c} for c in args.model]
    if args.no_plots:
        overrides["plots"] = False
    try:
        cfg = load_config(args.config, **overrides)
        cfg["kind"] = SUBCOMMANDS[args.command]
        report = run_experiment(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps({"out": cfg["out"], "files": len(report["files"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
