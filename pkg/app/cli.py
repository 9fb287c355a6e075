"""
Command-line entry point.

    python -m app.cli lifetime --config exp.json --temp-c 85
    python -m app.cli compare --config exp.json --out output/compare
    python -m app.cli sweep --axis temperature --values -30 25 100

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from app.config import settings
from app.schemas import ExperimentConfig
from app.services import harness
from app.services.checkpoint import save_checkpoint
from app.services.duplex import learnable_params
from app.services.export import report_json, write_json_report, write_run
from app.services.memory import RetentionRangeError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3

RUNNERS = {
    "lifetime": harness.run_lifetime,
    "schedule": harness.run_schedule,
    "train": harness.run_train,
    "compare": harness.run_compare,
    "sweep": harness.run_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dudnn-sim", description="Duplex-training hardware simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--mode", choices=["analytical", "detailed"], help="systolic timing mode")
    common.add_argument("--temp-c", type=float, dest="temp_c", help="operating temperature (C)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("lifetime", parents=[common], help="data lifetimes and refresh needs of one step")
    sub.add_parser("schedule", parents=[common], help="dump the instruction schedule as text")
    sub.add_parser("train", parents=[common], help="train one model and report TTA / ETA")
    sub.add_parser("compare", parents=[common], help="variant x hardware comparison table")
    sweep = sub.add_parser("sweep", parents=[common], help="sweep one parameter")
    sweep.add_argument("--axis", help="sweep axis")
    sweep.add_argument("--values", type=float, nargs="+", help="sweep values")
    sub.add_parser("validate-config", parents=[common], help="check a config and print the run plan")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Read the config file (or defaults) and apply command-line overrides."""
    data = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
    data.setdefault("seed", settings.default_seed)
    hardware = data.setdefault("hardware", {})
    hardware.setdefault("temperature_c", settings.default_temperature_c)
    experiment = data.setdefault("experiment", {})

    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = str(args.out)
    if args.mode is not None:
        hardware["mode"] = args.mode
    if args.temp_c is not None:
        hardware["temperature_c"] = args.temp_c
    if args.command in RUNNERS:
        experiment["kind"] = args.command
    if getattr(args, "axis", None):
        experiment["sweep_axis"] = args.axis
    if getattr(args, "values", None):
        experiment["sweep_values"] = args.values
    return ExperimentConfig.model_validate(data)


def _summary(kind: str, report: dict) -> str:
    if kind == "lifetime":
        return (f"{report['variant']} on {report['profile']}: T_data {report['t_data_us']:.3f} us, "
                f"retention {report['retention_us']:.3f} us, "
                f"max refresh {report['refresh']['max_count']}")
    if kind == "train":
        tta = report["tta_eta"]
        return (f"{report['variant']} on {report['profile']}: final accuracy "
                f"{report['final_accuracy']:.3f}, TTA {tta['tta_s']} s, ETA {tta['eta']}")
    if kind in ("compare", "sweep"):
        return f"{len(report['rows'])} rows"
    return ""


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate-config":
        print(report_json(cfg.model_dump(mode="json")), end="")
        return EXIT_OK

    out_dir = Path(cfg.output_dir or settings.output_dir)
    kind = args.command
    try:
        report = RUNNERS[kind](cfg)
    except (harness.ConfigError, RetentionRangeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.ExperimentError as e:
        logger.error("Run failed: %s", e)
        write_json_report({"error": str(e), "partial": e.partial}, out_dir / "partial.json")
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUN
    except Exception as e:
        logger.exception("Run failed")
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUN

    if kind == "train":
        print(save_checkpoint(out_dir / "model.ckpt", learnable_params(report.spec)))
    if hasattr(report, "to_dict"):
        report = report.to_dict()
    for path in write_run(kind, report, out_dir):
        print(path)
    summary = _summary(kind, report)
    if summary:
        print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
