from __future__ import annotations

import argparse
from typing import List, Optional

from efficient_vb.config import ExperimentConfig
from efficient_vb.exceptions import EfficientVBError
from efficient_vb.experiment import compare, diagnose_directory, run_experiment, run_sweep, simulate_to_dir
from efficient_vb.logging import logger, set_verbose

COMMANDS = ("simulate", "fit", "sweep", "diagnose", "compare")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efficient-vb", description="Variational and exact inference for state space models."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "Simulate data from the configured model and write data.csv and states_true.csv.",
        "fit": "Fit every configured method and write draws, states, ELBO traces and reports.",
        "sweep": "Repeat fits over sample sizes or recalibration intervals.",
        "diagnose": "Recompute report_<method>.json from the draws in the output directory.",
        "compare": "Fit every configured method and write comparison tables.",
    }
    for command in COMMANDS:
        p = sub.add_parser(command, help=helps[command])
        p.add_argument("--config", required=True, help="Experiment configuration (YAML).")
        p.add_argument("--seed", type=int, default=None, help="Global seed, overrides the configuration.")
        p.add_argument("--threads", type=int, default=None, help="Number of fits run concurrently.")
        p.add_argument("--out", default=None, help="Output directory.")
        p.add_argument("--verbose", action="store_true", help="Debug logging.")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_verbose(True)
    try:
        config = ExperimentConfig.from_yaml(args.config).with_overrides(
            seed=args.seed, threads=args.threads, output_dir=args.out
        )
        if args.command == "simulate":
            simulate_to_dir(config)
        elif args.command == "fit":
            run_experiment(config)
        elif args.command == "sweep":
            run_sweep(config)
        elif args.command == "diagnose":
            diagnose_directory(config)
        else:
            compare(config)
    except (EfficientVBError, OSError) as error:
        logger.error(f"{args.command} failed: {error}")
        return 1
    return 0
