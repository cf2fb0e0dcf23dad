import argparse
import json
import logging
import sys

from pydantic import ValidationError

from app.config import LOG_LEVEL
from app.exceptions import ConfigError, LabError
from app.routers.experiments import run
from app.schemas.experiment import SUBCOMMANDS, ExperimentConfig

logger = logging.getLogger(__name__)


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        description="Numerical lab for one-sided A2 weights and causal singular integrals",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m app.main --subcommand characteristic --config configs/default.json
  python -m app.main --subcommand sweep --config configs/default.json --m 10 --threads 4
  python -m app.main --subcommand verify --pin
        """,
    )
    parser.add_argument("--subcommand", choices=SUBCOMMANDS, required=True, help="experiment to run")
    parser.add_argument("--config", type=str, default=None, help="path to the JSON experiment config")
    parser.add_argument("--out", type=str, default=None, help="output directory (overrides config)")
    parser.add_argument("--threads", type=int, default=None, help="worker count (overrides config)")
    parser.add_argument("--seed", type=int, default=None, help="base random seed (overrides config)")
    parser.add_argument("--m", type=int, action="append", default=None, help="grid depth; repeat for several")
    parser.add_argument("--pin", action="store_true", help="verify, sweep: write the fitted constants as the new pins")
    return parser.parse_args(argv)


def _field_errors(e: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors())


def load_config(args) -> ExperimentConfig:
    """Config file (or defaults) with the CLI overrides applied, validated as one document."""
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as e:
            raise ConfigError(f"config: cannot read {args.config}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: {args.config} is not valid JSON ({e.msg} at line {e.lineno})") from e
    if args.out is not None:
        raw["output_dir"] = args.out
    if args.threads is not None:
        raw["threads"] = args.threads
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.m is not None:
        raw.setdefault("grid", {})["m"] = args.m
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"config: {_field_errors(e)}") from e


def main(argv=None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = parse_args(argv)
    try:
        config = load_config(args)
        bundle = run(args.subcommand, config, pin=args.pin)
    except LabError as e:
        logger.error("%s failed: %s", args.subcommand, e.detail)
        print(e.detail, file=sys.stderr)
        return e.exit_code

    print(json.dumps(bundle.summary, indent=2, sort_keys=True, default=float))
    for name in bundle.files:
        logger.info("wrote %s", name)
    if bundle.failed:
        for inv in bundle.failed:
            print(f"FAILED {inv.name} value={inv.value} bound={inv.bound} {inv.detail}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
