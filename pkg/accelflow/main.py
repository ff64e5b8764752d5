"""
Command-line entry point.

    python -m accelflow run --preset gaussian_fig1 --out results/fig1
    python -m accelflow run --preset comparison_fig3 --master-seed 0 --runs 100 --out results/fig3
    python -m accelflow sweep --preset mixture_fig2 --axis epsilon --values 0.001,0.01,0.1 --out results/eps

Exit codes: 0 success, 1 at least one run failed, 2 configuration error.
"""
import argparse
import logging
import sys
from typing import List, Optional, Sequence

from accelflow import __version__
from accelflow.core.config import settings
from accelflow.core.errors import ConfigError
from accelflow.services.config_loader import PRESETS, load_config
from accelflow.services.experiment_service import SWEEP_AXES, ExperimentService

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None,
                        help="Named experiment preset (default: the config file's preset, else custom)")
    parser.add_argument("--config", default=None, help="Flat key = value configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one configuration key; repeatable")
    parser.add_argument("--out", default=None, help="Output directory")
    seeds = parser.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", type=_int_list, default=None, help="Comma-separated run seeds")
    seeds.add_argument("--master-seed", type=int, default=None, help="Master seed for derived run seeds")
    parser.add_argument("--runs", type=int, default=None, help="Number of seeds derived from --master-seed")
    parser.add_argument("--workers", type=int, default=None,
                        help=f"Worker pool size (default ACCELFLOW_MAX_WORKERS={settings.MAX_WORKERS})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="accelflow",
                                     description="Interacting-particle accelerated gradient flow sampler")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help=f"Logging level (default {settings.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run_parser = sub.add_parser("run", help="Run an experiment for every seed")
    _add_common(run_parser)

    sweep_parser = sub.add_parser("sweep", help="Sweep N, K or epsilon with everything else fixed")
    _add_common(sweep_parser)
    sweep_parser.add_argument("--axis", choices=SWEEP_AXES, required=True, help="Swept parameter")
    sweep_parser.add_argument("--values", required=True, help="Comma-separated values")
    return parser


def parse_sweep_values(axis: str, text: str) -> List[float]:
    """Parse `--values`; N and K take integers, epsilon takes floats."""
    cast = float if axis == "epsilon" else int
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse '{text}' for axis {axis}: {e}", key_path="--values") from e
    if not values:
        raise ConfigError("at least one sweep value is required", key_path="--values")
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, (args.log_level or settings.LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.runs is not None and args.master_seed is None:
            raise ConfigError("--runs requires --master-seed", key_path="--runs")
        cfg = load_config(
            path=args.config,
            preset=args.preset,
            overrides=args.overrides,
            seeds=args.seeds,
            master_seed=args.master_seed,
            runs=args.runs,
            output_dir=args.out,
        )
        service = ExperimentService(cfg, max_workers=args.workers)
        if args.cmd == "sweep":
            summary = service.sweep(args.axis, parse_sweep_values(args.axis, args.values))
        else:
            summary = service.run_experiment()
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    logger.info(f"Outputs written to {cfg.output_dir}")
    return EXIT_PARTIAL_FAILURE if summary.exit_status else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
