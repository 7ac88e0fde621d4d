"""Command-line interface for mkdvlab."""

from __future__ import annotations

import argparse
from dataclasses import replace
from datetime import datetime, timezone
import logging
from pathlib import Path
from typing import Sequence

from mkdvlab.config import load_run_config
from mkdvlab.errors import ConfigError
from mkdvlab.experiments import run_experiment
from mkdvlab.lab_debug import LAB_LOGGER_NAME
from mkdvlab.models import EXPERIMENTS
from mkdvlab.reporting import build_run_manifest, write_run_reports

_HELP = {
    "sample": "Draw fields from the Gaussian measure and compare the empirical spectrum with its variances.",
    "evolve": "Integrate the truncated flow and record energies, norms and convergence diagnostics.",
    "estar": "Compare analytic and finite-difference energy derivatives under the truncated flow.",
    "decay": "Tabulate pairing bounds, exact Wick moments and Monte-Carlo moments across cutoffs.",
    "invariance": "Estimate the almost-invariance defect of Sobolev balls under the truncated flow.",
    "converge": "Measure the distance between truncated flows at cutoffs N and 2N.",
}


def build_parser() -> argparse.ArgumentParser:
    """Create the command-line parser."""
    parser = argparse.ArgumentParser(prog="mkdvlab")
    subparsers = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        sub = subparsers.add_parser(name, help=_HELP[name], description=_HELP[name])
        sub.add_argument("--config", required=True, help="Flat JSON config file or a saved run.json.")
        sub.add_argument(
            "--workers",
            type=int,
            default=None,
            help="Worker processes for per-sample work. Overrides the config value.",
        )
        sub.add_argument(
            "--seed",
            type=int,
            default=None,
            help="Root seed. Overrides MKDV_SEED and the config value.",
        )
        sub.add_argument(
            "--output-dir",
            default=None,
            help="Directory for data files and reports. Overrides the config value.",
        )
        sub.add_argument(
            "--strict",
            action="store_true",
            help="Fail the experiment when any warning is captured.",
        )
        sub.add_argument(
            "--verbose",
            action="store_true",
            help="Log progress at INFO level.",
        )
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate_cli_args(parser=parser, args=args)
    _configure_lab_logging(verbose=bool(args.verbose))
    started = datetime.now(timezone.utc)

    try:
        config = load_run_config(
            Path(args.config),
            experiment=args.experiment,
            seed_override=args.seed,
            workers_override=args.workers,
        )
    except ConfigError as exc:
        parser.error(str(exc))
    overrides: dict[str, object] = {}
    if args.output_dir is not None:
        overrides["output_dir"] = str(args.output_dir)
    if args.strict:
        overrides["strict"] = True
    if args.verbose:
        overrides["verbose"] = True
    if overrides:
        config = replace(config, **overrides)  # type: ignore[arg-type]

    report_dir = Path(config.output_dir)
    try:
        report_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        parser.error(f"Cannot create output directory {report_dir}: {exc}")

    result = run_experiment(config)
    if config.verbose:
        print(f"{result.status}: {result.experiment} ({len(result.outputs)} output(s))")
        for path in result.outputs:
            print(f"wrote {path}")

    manifest = build_run_manifest(config=config, experiments=[result], started_utc=started)
    json_path, txt_path = write_run_reports(manifest=manifest, report_dir=report_dir)

    for error in result.errors:
        print(f"mkdvlab: error: {error}")
    print(f"mkdvlab: {result.experiment} finished with status {result.status}")
    print(f"mkdvlab: reports written to {json_path} and {txt_path}")

    has_failures = manifest.totals["experiments_failed"] > 0 or bool(manifest.errors)
    return 2 if has_failures else 0


def main(argv: Sequence[str] | None = None) -> None:
    """Run the CLI as a console entry point."""
    raise SystemExit(run_cli(argv))


def _configure_lab_logging(verbose: bool) -> None:
    """Send mkdvlab records to stderr at INFO when verbose, otherwise keep them quiet."""
    logger = logging.getLogger(LAB_LOGGER_NAME)
    logger.setLevel(logging.INFO if verbose else logging.WARNING)
    if verbose and not any(isinstance(handler, logging.StreamHandler) for handler in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
    if not any(isinstance(handler, logging.NullHandler) for handler in logger.handlers):
        logger.addHandler(logging.NullHandler())


def _validate_cli_args(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    """Validate CLI argument combinations after parsing."""
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be at least 1.")
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be non-negative.")
