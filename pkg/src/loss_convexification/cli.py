import argparse
import json
import logging
import sys
from typing import Any, Dict

from .experiments import EXIT_CODES, ExperimentRunner

logger = logging.getLogger(__name__)

# Subcommand -> experiments it can run (first is the default)
COMMANDS = {
    "gen-data": ("gen-data",),
    "train": ("train-registration", "train-sequence"),
    "infer": ("infer-sweep",),
    "icp": ("icp-ablation",),
    "audit": ("audit",),
    "slice": ("slice",),
    "simulate-averaging": ("averaging-sim",),
    "sweep": ("grid-search", "compare", "constraint-ablation"),
}

# Subcommands that read point-cloud pairs written by gen-data
DATA_COMMANDS = ("train", "infer", "icp")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlc", description="Train, run and audit loss-convexified iterative models"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, experiments in COMMANDS.items():
        sub = subparsers.add_parser(command, help=f"run the {' / '.join(experiments)} experiment")
        sub.add_argument("--config", "-c", type=str, default=None, help="Path to a JSON config file")
        sub.add_argument("--seed", type=int, default=None, help="Override the config seed")
        sub.add_argument("--out", "-o", type=str, default=f"runs/{command}", help="Output directory for artifacts")
        sub.add_argument(
            "--log-level",
            type=str,
            default="INFO",
            choices=["DEBUG", "INFO", "WARNING", "ERROR"],
            help="Logging verbosity",
        )
        if command in DATA_COMMANDS:
            sub.add_argument("--data", type=str, default=None, help="Directory of point-cloud pairs from gen-data")
        if len(experiments) > 1:
            sub.add_argument(
                "--experiment", type=str, default=experiments[0], choices=experiments, help="Experiment to run"
            )
    return parser


def with_data_dir(config: Dict[str, Any], command: str, directory: str) -> Dict[str, Any]:
    """Point the data settings of ``config`` at a gen-data pairs directory."""
    config = dict(config)
    if command == "train":
        train = dict(config.get("train") or {})
        train["data"] = dict(train.get("data") or {}, dir=directory)
        config["train"] = train
    else:
        config["data"] = dict(config.get("data") or {}, dir=directory)
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    experiment = getattr(args, "experiment", COMMANDS[args.command][0])
    runner = ExperimentRunner()
    try:
        config = runner.load_config(args.config)
    except Exception as e:
        logger.error("%s", e)
        result = {"status": "error", "experiment": experiment, "kind": "config", "error": str(e)}
    else:
        if getattr(args, "data", None):
            config = with_data_dir(config, args.command, args.data)
        result = runner.run_experiment(experiment, config, args.out, seed=args.seed)

    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    if result["status"] == "success":
        return 0
    return EXIT_CODES.get(result["kind"], 1)


if __name__ == "__main__":
    sys.exit(main())
