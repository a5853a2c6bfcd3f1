"""
Command line entry point ``stab``.

Usage::

    stab eigs --config configs/example.ini
    stab simulate --config configs/example.ini --controlled --level 5
    stab simulate --config configs/example.ini --level 5 --initial-state state.npy
    stab convergence --config configs/example.ini [--uncontrolled]
    stab cost --config configs/example.ini
    stab spectrum --config configs/example.ini --level 4
    stab riccati --config configs/example.ini

Exit status is 0 on success, 2 for configuration errors and 3 for numerical
failures.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from coupled_stabilization import experiments
from coupled_stabilization.config import ExperimentConfig, load_config
from coupled_stabilization.exceptions import (
    ConfigurationError,
    NumericalError,
    StabilizationError,
)

LOGGER = logging.getLogger("coupled_stabilization.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def setup_logging(level=logging.INFO):
    logging.basicConfig(
        level=level,
        format="[%(asctime)s] %(levelname)s - %(message)s",
        datefmt="%d-%m-%Y %H:%M:%S",
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI experiment file")
    common.add_argument("--level", type=int, default=None, help="mesh level (h = 2^-level)")
    common.add_argument("--precision", choices=["short", "full"], default=None)
    common.add_argument("--output-dir", type=Path, default=None)
    common.add_argument("--tb-logdir", type=Path, default=None, help="TensorBoard log directory")
    common.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )

    p = argparse.ArgumentParser("stab", description="Feedback stabilization of a coupled parabolic system")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("eigs", parents=[common], help="eigenvalue errors and orders")

    sim = sub.add_parser("simulate", parents=[common], help="energy time series")
    sim.add_argument("--controlled", action="store_true")
    sim.add_argument("--dump-riccati", type=Path, default=None, metavar="DIR")
    sim.add_argument(
        "--initial-state", type=Path, default=None, metavar="FILE", help="start from a saved .npy state"
    )
    sim.add_argument(
        "--save-state", type=Path, default=None, metavar="DIR", help="save states at eval_time and t_final"
    )

    conv = sub.add_parser("convergence", parents=[common], help="inter-level errors and orders")
    conv.add_argument("--uncontrolled", action="store_true")

    sub.add_parser("cost", parents=[common], help="finite-horizon cost per level")
    sub.add_parser("spectrum", parents=[common], help="eigenvalues before and after stabilization")
    sub.add_parser("riccati", parents=[common], help="full-order Riccati cost on coarse levels")
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with command line overrides applied."""
    config = load_config(args.config) if args.config is not None else ExperimentConfig()
    config = config.with_overrides(precision=args.precision, output_dir=args.output_dir)
    if args.level is not None and args.command in ("eigs", "convergence", "cost"):
        levels = [lvl for lvl in config.levels if lvl <= args.level]
        if not levels:
            raise ConfigurationError(f"no configured level is <= {args.level}")
        config = config.with_overrides(levels=levels)
    return config


def run(args: argparse.Namespace) -> None:
    config = resolve_config(args)
    writer = experiments.open_writer(args.tb_logdir)
    try:
        if args.command == "eigs":
            experiments.cmd_eigs(config, writer=writer)
        elif args.command == "simulate":
            experiments.cmd_simulate(
                config,
                controlled=args.controlled,
                level=args.level,
                dump_dir=args.dump_riccati,
                writer=writer,
                initial_state=args.initial_state,
                state_dir=args.save_state,
            )
        elif args.command == "convergence":
            experiments.cmd_convergence(config, controlled=not args.uncontrolled, writer=writer)
        elif args.command == "cost":
            experiments.cmd_cost(config, writer=writer)
        elif args.command == "spectrum":
            experiments.cmd_spectrum(config, level=args.level)
        elif args.command == "riccati":
            experiments.cmd_riccati(config)
    finally:
        if writer is not None:
            writer.close()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(getattr(logging, args.log_level))
    try:
        run(args)
    except NumericalError as exc:
        LOGGER.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except StabilizationError as exc:
        LOGGER.error("configuration error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
