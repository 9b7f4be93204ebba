import argparse
import sys
from typing import List, Optional

from app.core.config import settings
from app.core.exceptions import ConfigError, CouplingError
from app.core.logging_config import configure_logging, get_logger
from app.services.bench_runner import apply_overrides, load_config, run_scenario

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_CONVERGED = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glc-bench",
        description="Run global/local coupling scenarios and write CSV/JSON reports.",
    )
    parser.add_argument("--config", required=True, help="Scenario INI file.")
    parser.add_argument("--mode", help="Engine(s) to run, comma separated: sync, aitken, async, submodel.")
    parser.add_argument("--omega", help="Relaxation value(s), comma separated.")
    parser.add_argument("--seed", type=int, help="Seed of the delay schedule.")
    parser.add_argument("--out", help="Output directory for results.csv, history/ and summary.json.")
    parser.add_argument("--log-level", default=settings.log_level, help="Log level (default from GLC_LOG_LEVEL).")
    return parser


def _parse_omega(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--omega expects comma-separated numbers, got '{text}'", key="omega") from e


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    configure_logging(args.log_level, settings.log_json)

    try:
        config = load_config(args.config)
        config = apply_overrides(config, mode=args.mode, omega=_parse_omega(args.omega), seed=args.seed, out=args.out)
    except ConfigError as e:
        logger.error("Configuration error", key=e.key, error=str(e))
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        rows = run_scenario(config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CouplingError as e:
        logger.error("Scenario failed", error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    for row in rows:
        print(f"{row.scenario:<16} {row.mode:<8} omega={row.omega:<8g} it={row.it_global:<6d} "
              f"fine=[{row.it_fine_min}-{row.it_fine_max}] status={row.status}")
    if not all(row.converged for row in rows):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
