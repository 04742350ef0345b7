#!/usr/bin/env python
"""
Test runner for kclflow.

Wraps pytest with shortcuts for the test modules of each pipeline stage,
the slow integration marker and coverage reporting.
"""

import argparse
import os
import subprocess
import sys
from typing import List

from colorama import Fore, Style, init as colorama_init

MODULES = {
    "grid": "tests/test_grid_model.py",
    "parser": "tests/test_case_parser.py",
    "solver": "tests/test_acpf_solver.py",
    "projection": "tests/test_kcl_projection.py",
    "scenarios": "tests/test_scenario_gen.py",
    "surrogate": "tests/test_surrogate_net.py",
    "training": "tests/test_train_eval.py",
    "cli": "tests/test_commands.py",
    "config": "tests/test_config.py",
    "errors": "tests/test_errors.py",
    "logging": "tests/test_logging.py",
}

# Finite-difference checks of the Jacobian, projection and network gradients
GRADIENT_KEYWORD = "finite_differences or jacobian"


def build_command(args: argparse.Namespace) -> List[str]:
    """pytest argv for the parsed options."""
    cmd = [sys.executable, "-m", "pytest"]

    if args.verbose:
        cmd.append("-v")
    elif args.quiet:
        cmd.append("-q")
    if args.fail_fast:
        cmd.append("-x")
    if args.show_locals:
        cmd.append("-l")

    keywords = [k for k in (args.keyword, GRADIENT_KEYWORD if args.gradients else None) if k]
    if keywords:
        cmd.extend(["-k", " and ".join(f"({k})" for k in keywords)])

    if args.fast:
        cmd.extend(["-m", "not integration"])
    elif args.integration:
        cmd.extend(["-m", "integration"])

    if args.coverage:
        cmd.extend(["--cov=kclflow", "--cov=management"])
        cmd.append("--cov-report=html" if args.html_cov else "--cov-report=term-missing")

    if args.module:
        cmd.extend(MODULES[m] for m in args.module)
    elif args.test_path:
        cmd.append(args.test_path)
    else:
        cmd.append("tests/")

    cmd.extend(args.pytest_args)
    return cmd


def run_tests(args: argparse.Namespace) -> int:
    """Run pytest in testing mode and return its exit code."""
    cmd = build_command(args)
    colorama_init()
    print(f"{Style.BRIGHT}{Fore.BLUE}Running: {' '.join(cmd)}{Style.RESET_ALL}")

    env = os.environ.copy()
    env["KCLFLOW_TESTING"] = "1"
    env.setdefault("KCLFLOW_LOG_LEVEL", "WARNING")
    result = subprocess.run(cmd, env=env)

    colour = Fore.GREEN if result.returncode == 0 else Fore.RED
    print(f"{colour}pytest exited with {result.returncode}{Style.RESET_ALL}")
    return result.returncode


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Run the kclflow test suite")
    parser.add_argument("test_path", nargs="?", help="Path to a specific test file or directory")
    parser.add_argument("--module", nargs="+", choices=sorted(MODULES),
                        help="Run only the tests of these pipeline stages")
    parser.add_argument("-k", "--keyword", help="Only run tests matching the expression")
    parser.add_argument("--gradients", action="store_true",
                        help="Only run the finite-difference gradient checks")

    marker = parser.add_mutually_exclusive_group()
    marker.add_argument("--fast", action="store_true", help="Skip desk-scale integration tests")
    marker.add_argument("--integration", action="store_true", help="Run only integration tests")

    parser.add_argument("-v", "--verbose", action="store_true", help="Verbose output")
    parser.add_argument("-q", "--quiet", action="store_true", help="Quiet output")
    parser.add_argument("-x", "--fail-fast", action="store_true", help="Stop on the first failure")
    parser.add_argument("-l", "--show-locals", action="store_true", help="Show locals in tracebacks")

    parser.add_argument("-c", "--coverage", action="store_true", help="Report coverage")
    parser.add_argument("--html-cov", action="store_true", help="Write an HTML coverage report")
    return parser


def main() -> None:
    parser = build_parser()
    args, extra = parser.parse_known_args()
    args.pytest_args = extra
    if args.verbose and args.quiet:
        parser.error("Cannot use both --verbose and --quiet")
    if args.html_cov and not args.coverage:
        parser.error("--html-cov requires --coverage")

    sys.exit(run_tests(args))


if __name__ == "__main__":
    main()
