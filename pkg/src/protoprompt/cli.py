"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .backbone import ConfigError, InputError
from .config import RunConfig, dump_config, load_config, parse_override

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("protoprompt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--device", help="torch device name, e.g. cpu")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protoprompt", description="Concept-prototype prompt tuning laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("evaluate", help="metrics for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--report", help="report path (default: <out>/report_<split>.json)")
    p.add_argument("--no-perturbation", action="store_true", help="stability with a zero perturbation")

    p = sub.add_parser("visualize", help="region overlays and importance charts")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True, help="image files")
    p.add_argument("--arrays", help="also write assignments.npz here")

    p = sub.add_parser("ablate", help="train+evaluate over one ablation axis")
    _common(p)
    p.add_argument("--axis", required=True, choices=["layers", "prototype_counts", "loss_toggles"])
    p.add_argument("--values", help="YAML list of settings (default: built-in list for the axis)")

    p = sub.add_parser("generate-data", help="write the synthetic dataset as an image folder")
    _common(p)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = dict(parse_override(item) for item in args.override)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.device is not None:
        overrides["device"] = args.device
    return load_config(args.config, overrides)


def _echo(config: RunConfig) -> None:
    print("# resolved config")
    print(dump_config(config), end="")


def cmd_train(args, config: RunConfig) -> None:
    from .train import train

    result = train(config, resume=args.checkpoint)
    summary = {
        "output_dir": str(result.output_dir),
        "final_checkpoint": str(result.final_checkpoint),
        "best_val_accuracy": result.best_val_accuracy,
        "val": result.last_metrics.to_dict() if result.last_metrics else None,
    }
    print(json.dumps(summary, indent=2))


def cmd_evaluate(args, config: RunConfig) -> None:
    from .metrics import Perturbation
    from .train import evaluate

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = Path(args.report) if args.report else out / f"report_{args.split}.json"
    pert = Perturbation(0.0, 0.0) if args.no_perturbation else None
    cfg = config if args.config or args.override else None
    report = evaluate(args.checkpoint, cfg, args.split, report_path, pert)
    print(json.dumps({"accuracy": report.accuracy, "consistency": report.consistency,
                      "stability": report.stability, "mean_iou": report.mean_iou, "report": str(report_path)}, indent=2))


def cmd_visualize(args, config: RunConfig) -> None:
    from .visualize import visualize

    res = visualize(args.checkpoint, args.images, config.output_dir, args.arrays)
    print(json.dumps(res, indent=2))
    if not res["files"]:
        raise RuntimeError("no image could be decoded")


def cmd_ablate(args, config: RunConfig) -> None:
    from .ablate import ablate

    values = yaml.safe_load(args.values) if args.values else None
    if values is not None and not isinstance(values, list):
        raise ConfigError("--values must be a YAML list")
    rows = ablate(config, args.axis, values)
    print(json.dumps(rows, indent=2))


def cmd_generate_data(args, config: RunConfig) -> None:
    from .data import generate, write_folder

    if config.data.source != "synth":
        raise ConfigError("generate-data needs data.source: synth")
    root = write_folder(generate(config.data.synth), config.output_dir)
    print(json.dumps({"root": str(root), "config_hash": config.data.synth.config_hash()}))


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "visualize": cmd_visualize,
    "ablate": cmd_ablate,
    "generate-data": cmd_generate_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(message)s")
        config = resolve_config(args)
    except (UsageError, ConfigError, yaml.YAMLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    _echo(config)
    try:
        COMMANDS[args.command](args, config)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any other failure is a runtime failure
        log.debug("command failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
