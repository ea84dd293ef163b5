"""`affinity-lab <stage> [--config FILE] [--seed N] [--out DIR] [--section.field VALUE ...]`"""

import argparse
import sys
from typing import List, Optional

from affinity_lab import __version__
from affinity_lab.pipeline.experiments import SWEEP_PARAMETERS
from affinity_lab.pipeline.stages import STAGES, SweepStage
from affinity_lab.utils.config import add_args, config_from_args

HELP = {
    "gen-data": "Generate the toy antibody/antigen dataset",
    "train-flow": "Train the structure flow model and the inverse-folding classifier",
    "train-predictors": "Supervised training of the sequence and structure predictors",
    "coteach": "Pairwise fine-tuning with and without co-teaching selection",
    "run": "Design antibodies for the held-out (or configured) antigens",
    "ablate": "Run every ablation variant and write ablation.csv",
    "sweep": "Sweep guidance strength or sampling steps",
    "evaluate": "Recompute metrics.csv from designs.csv",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affinity-lab", description="Toy antibody affinity maturation")
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub = commands.add_parser(name, help=HELP[name])
        add_args(sub)
        if name == SweepStage.stage_name:
            sub.add_argument(
                "--parameter",
                choices=[*SWEEP_PARAMETERS, "all"],
                default="all",
                help="Which hyperparameter to sweep",
            )
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        extra = {}
        if args.command == SweepStage.stage_name:
            extra["parameter"] = args.parameter
            del args.parameter
        config = config_from_args(args)
        with STAGES[args.command](config, **extra) as stage:
            stage.run()
    except Exception as e:
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
