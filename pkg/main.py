"""
Command-line entry point of the spectral LoRA lab.

    sll <command> --config CONFIG.json --out RUN_DIR [options]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 unmet pipeline target, 5 checkpoint or report error.
"""

import argparse
import logging
import sys
import traceback
from typing import Any, Dict, List, Optional

import dotenv

from orchestration.workflow import ExperimentWorkflow
from utils.errors import (
    CheckpointError,
    ConfigError,
    LabError,
    NumericalError,
    PipelineTargetError,
    ReportError,
)
from utils.json_utils import load_json_file
from utils.logging_utils import configure_logging

logger = logging.getLogger(__name__)

COMMANDS = ["synth", "pretrain-poison", "finetune", "eval", "rescale", "diagnose", "threshold", "sweep", "ablate"]

EXIT_CODES = [
    (ConfigError, 2),
    (NumericalError, 3),
    (PipelineTargetError, 4),
    (CheckpointError, 5),
    (ReportError, 5),
]


def exit_code_for(error: Exception) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(error, cls):
            return code
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sll", description="Spectral LoRA backdoor lab")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline to run")
    parser.add_argument("--config", type=str, help="Experiment configuration (JSON object)")
    parser.add_argument("--out", type=str, default="runs/latest", help="Run directory")
    parser.add_argument("--seed", type=int, help="Run a single seed instead of the configured list")
    parser.add_argument("--method", choices=["frozen", "fft", "lora", "rora"], help="Fine-tuning method")
    parser.add_argument("--toggles", type=str, help="RoRA toggles, e.g. cl,tr,pt or none")
    parser.add_argument("--axis", choices=["s", "lambda", "p", "r", "alpha"], help="Sweep axis")
    parser.add_argument("--values", type=str, help="Comma-separated sweep values")
    parser.add_argument("--layers", type=str, help="Rescale layer selector: none, topN, all or names")
    parser.add_argument("--checkpoint", type=str, help="Input checkpoint")
    parser.add_argument("--log-level", type=str, help="Log level (default SLL_LOG_LEVEL or INFO)")
    return parser


def parse_values(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--values must be a comma-separated list of numbers, got '{text}'") from e


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    """Configuration file contents with the command-line overrides applied."""
    raw: Dict[str, Any] = load_json_file(args.config) if args.config else {}
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.method:
        raw["method"] = args.method
    if args.toggles is not None:
        raw["toggles"] = args.toggles
    if args.axis:
        raw["axis"] = args.axis
    if args.values is not None:
        raw["values"] = parse_values(args.values)
    if args.layers is not None:
        raw["rescale_layers"] = args.layers
    return raw


def _require_checkpoint(args: argparse.Namespace) -> str:
    if not args.checkpoint:
        raise ConfigError(f"'{args.command}' needs --checkpoint")
    return args.checkpoint


def run_command(args: argparse.Namespace) -> ExperimentWorkflow:
    workflow = ExperimentWorkflow(resolve_config(args), args.out)
    command = args.command
    if command == "synth":
        workflow.synth()
    elif command == "pretrain-poison":
        workflow.pretrain_poison()
    elif command == "finetune":
        workflow.finetune(checkpoint=args.checkpoint)
    elif command == "eval":
        workflow.evaluate_checkpoint(_require_checkpoint(args))
    elif command == "rescale":
        workflow.rescale_checkpoint(_require_checkpoint(args))
    elif command == "diagnose":
        workflow.diagnose(checkpoint=args.checkpoint)
    elif command == "threshold":
        workflow.threshold(checkpoint=args.checkpoint)
    elif command == "sweep":
        workflow.sweep()
    elif command == "ablate":
        workflow.ablate()
    workflow.finish()
    return workflow


def print_tables(workflow: ExperimentWorkflow) -> None:
    for kind in workflow.hub.records():
        print(f"\n{kind}")
        print(workflow.hub.render(kind))


def main(argv: Optional[List[str]] = None) -> int:
    dotenv.load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.out, args.log_level)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        workflow = run_command(args)
    except LabError as e:
        code = exit_code_for(e)
        logger.debug(traceback.format_exc())
        print(f"error: {e}", file=sys.stderr)
        return code
    print_tables(workflow)
    logger.info(f"{args.command} finished, results in {args.out}")
    return 0


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
