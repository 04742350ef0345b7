"""
Main entry point for the kclflow CLI
"""

import argparse
import logging
import signal
import sys
from typing import List, Optional

from kclflow.config import Settings
from kclflow.core.errors.base import BaseError, EXIT_VALIDATION
from kclflow.core.logging import configure_logging
from kclflow.version import __version__

from .commands import REPRO_GRIDS, REPRO_SCALES, dispatch, load_settings

logger = logging.getLogger("management.main")

_DEFAULTS = Settings.model_fields


def _default(name: str):
    return _DEFAULTS[name].default


def setup_signal_handlers() -> None:
    """Exit quietly on SIGTERM; SIGINT surfaces as KeyboardInterrupt."""
    def signal_handler(sig, frame):
        logger.info("Operation cancelled by signal %s.", sig)
        sys.exit(130)

    if hasattr(signal, "SIGTERM"):
        signal.signal(signal.SIGTERM, signal_handler)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one sub-command per pipeline stage."""
    parser = argparse.ArgumentParser(
        prog="kclflow",
        description="Power-flow surrogate toolkit with exact KCL projection.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--config",
        default=None,
        help="key=value settings file; command-line flags take precedence over it"
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help=f"Worker processes for scenario generation (settings default: {_default('workers')})"
    )
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help=f"Logging level (settings default: {_default('log_level')})"
    )

    subparsers = parser.add_subparsers(dest="command", help="Command to run")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    # Import command
    import_parser = subparsers.add_parser("import", help="Parse a case file into grid JSON", formatter_class=fmt)
    import_parser.add_argument("--case", required=True, help="Case file path or fixture name (case14, case118)")
    import_parser.add_argument("--out", required=True, help="Output grid JSON")

    # Generate command
    gen_parser = subparsers.add_parser("generate", help="Generate a labelled scenario dataset", formatter_class=fmt)
    gen_parser.add_argument("--grid", required=True, help="Grid JSON, case file or fixture name")
    gen_parser.add_argument("--count", type=int, default=2000, help="Number of scenarios")
    gen_parser.add_argument("--regime", choices=["n", "n1"], default="n", help="N or N-1 regime")
    gen_parser.add_argument("--seed", type=int, default=0, help="Master generation seed")
    gen_parser.add_argument("--split-seed", type=int, default=0, help="Seed of the train/val/test shuffle")
    gen_parser.add_argument(
        "--stats-from",
        default=None,
        help="Training dataset whose normalization statistics an N-1 dataset reuses"
    )
    gen_parser.add_argument("--out", required=True, help="Output JSON-lines dataset")

    # Solve command
    solve_parser = subparsers.add_parser("solve", help="Run the Newton-Raphson oracle", formatter_class=fmt)
    solve_parser.add_argument("--grid", required=True, help="Grid JSON, case file or fixture name")
    solve_parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Solve a sampled scenario with this seed instead of the nominal point"
    )
    solve_parser.add_argument("--out", default=None, help="Output JSON (prints to stdout if omitted)")

    # Project command
    project_parser = subparsers.add_parser("project", help="Project flows onto the KCL-feasible set",
                                           formatter_class=fmt)
    project_parser.add_argument("--grid", required=True, help="Grid JSON, case file or fixture name")
    project_parser.add_argument("--flows", default=None, help="JSON file with flows, net_p and net_q")
    project_parser.add_argument("--data", default=None, help="Dataset to take a scenario from")
    project_parser.add_argument("--index", type=int, default=0, help="Scenario index within --data")
    project_parser.add_argument("--noise", type=float, default=0.05, help="Std of the noise added to --data flows")
    project_parser.add_argument("--method", choices=["pinv", "kaczmarz"], default="pinv", help="Projector")
    project_parser.add_argument("--ordering", choices=["fixed", "random", "weighted"], default="fixed",
                                help="Kaczmarz constraint ordering")
    project_parser.add_argument("--sweeps", type=int, default=500, help="Maximum Kaczmarz sweeps")
    project_parser.add_argument("--seed", type=int, default=0, help="Seed for noise and randomized orderings")
    project_parser.add_argument("--out", default=None, help="Output JSON (prints a summary if omitted)")

    # Train command
    train_parser = subparsers.add_parser("train", help="Train the surrogate", formatter_class=fmt)
    train_parser.add_argument("--data", required=True, help="Split N-regime training dataset")
    train_parser.add_argument("--grid", required=True, help="Grid JSON, case file or fixture name")
    train_parser.add_argument("--out", required=True, help="Output checkpoint (.npz)")
    train_parser.add_argument("--epochs", type=int, default=None,
                              help=f"Epochs (settings default: {_default('epochs')})")
    train_parser.add_argument("--batch-size", type=int, default=None,
                              help=f"Mini-batch size (settings default: {_default('batch_size')})")
    train_parser.add_argument("--lr", type=float, default=None,
                              help=f"Learning rate (settings default: {_default('learning_rate')})")
    train_parser.add_argument("--weight-decay", type=float, default=None,
                              help=f"Decoupled weight decay (settings default: {_default('weight_decay')})")
    train_parser.add_argument("--grad-clip", type=float, default=None, help="Global gradient-norm clip")
    train_parser.add_argument("--seed", type=int, default=0, help="Initialization and shuffling seed")
    train_parser.add_argument("--no-projection", action="store_true",
                              help="Train the ablation without the projection layer")

    # Eval command
    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint", formatter_class=fmt)
    eval_parser.add_argument("--ckpt", required=True, help="Checkpoint written by train")
    eval_parser.add_argument("--data", required=True, help="Dataset with a test split")
    eval_parser.add_argument("--grid", required=True, help="Grid JSON, case file or fixture name")
    eval_parser.add_argument("--runs", type=int, default=None,
                             help="Independent retrain+eval repetitions (default: KCLFLOW_RUNS)")
    eval_parser.add_argument("--train-data", default=None, help="Training dataset used when --runs > 1")
    eval_parser.add_argument("--report", default=None, help="Output report JSON (prints if omitted)")

    # Repro command
    repro_parser = subparsers.add_parser("repro", help="Run the full experiment", formatter_class=fmt)
    repro_parser.add_argument("--workdir", default="runs/repro", help="Directory for all artifacts")
    repro_parser.add_argument("--scale", choices=sorted(REPRO_SCALES), default="desk", help="Experiment scale")
    repro_parser.add_argument("--grids", nargs="+", default=list(REPRO_GRIDS), help="Fixture names")
    repro_parser.add_argument("--n-count", type=int, default=None, help="Override the N scenario count")
    repro_parser.add_argument("--n1-count", type=int, default=None, help="Override the N-1 scenario count")
    repro_parser.add_argument("--runs", type=int, default=None, help="Override the number of runs")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the CLI"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv

    if not args.command:
        parser.print_help()
        return EXIT_VALIDATION

    try:
        setup_signal_handlers()
        settings = load_settings(args.config, workers=args.workers, log_level=args.log_level)
        configure_logging(settings)
        logger.info("kclflow %s: %s", __version__, args.command)
        return dispatch(args, settings)
    except BaseError as e:
        for line in e.cli_lines():
            print(line, file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Operation cancelled by user.")
        return 130


if __name__ == "__main__":
    sys.exit(main())
