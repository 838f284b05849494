"""Coop Relay Sim - command-line entry point."""

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from app import __version__
from app.config import get_settings
from app.schemas.experiment import ExperimentMode
from app.services.experiment import ConfigError, get_experiment_service, load_experiment, write_csv

logger = logging.getLogger("coop_relay")

EXIT_OK = 0
EXIT_VALIDATION_FAILED = 1
EXIT_CONFIG_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coop-relay-sim",
        description="Analytic engine and slotted simulator for cooperative cognitive relaying.",
    )
    parser.add_argument("--config", type=Path, help="INI experiment file (defaults are used when omitted)")
    parser.add_argument("--mode", choices=[mode.value for mode in ExperimentMode], help="override [experiment] mode")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--slots", type=int, help="override the number of simulated slots")
    parser.add_argument("--out", type=Path, help="CSV output path (stdout when omitted)")
    parser.add_argument("--workers", type=int, help="parallel simulation processes")
    parser.add_argument("--log-level", default=None, help="logging level (default from LOG_LEVEL)")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    """Parse arguments, run the experiment and write its CSV. Returns the process exit code."""
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=(args.log_level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    for warning in settings.validate():
        logger.warning("Settings: %s", warning)

    try:
        spec = load_experiment(
            args.config, mode=args.mode, seed=args.seed, slots=args.slots, output=args.out, workers=args.workers
        )
    except (ConfigError, ValidationError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG_ERROR

    try:
        result = get_experiment_service().run(spec)
    except (ConfigError, ValidationError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG_ERROR

    if spec.output is None:
        write_csv(result, spec, sys.stdout)
    else:
        spec.output.parent.mkdir(parents=True, exist_ok=True)
        with spec.output.open("w", newline="", encoding="utf-8") as handle:
            write_csv(result, spec, handle)
        logger.info("Wrote %d rows to %s", len(result.rows), spec.output)

    if not result.passed:
        logger.error("Validation failed: %d checks did not pass", sum(row["passed"] is False for row in result.rows))
        return EXIT_VALIDATION_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run_cli())
