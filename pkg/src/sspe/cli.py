"""Command-line entry point: ``sspe <experiment> --config FILE --seed S --out DIR``."""

from __future__ import annotations

import argparse
import sys

from .experiments import EXPERIMENTS, ConfigError, load_config, run_experiment
from .io import DataFormatError

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sspe", description="Run a seeded, replicated SMC experiment.")
    p.add_argument("experiment", help=f"one of: {', '.join(EXPERIMENTS)}")
    p.add_argument("--config", required=True, help="JSON file with ExperimentConfig keys")
    p.add_argument("--seed", required=True, type=int, help="master seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--parallelism", type=int, default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which matches the config-error code
        return int(exc.code or 0)
    try:
        cfg = load_config(args.experiment, args.config, seed=args.seed, replicates=args.replicates,
                          parallelism=args.parallelism)
    except (ConfigError, DataFormatError) as exc:
        print(f"sspe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = run_experiment(cfg, args.out)
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"sspe: data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if res.failures:
        print(f"sspe: {len(res.failures)} of {len(res.failures) + len(res.results)} jobs failed; "
              f"see {args.out}/failures.json", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
