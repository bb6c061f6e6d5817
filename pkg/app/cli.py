"""Command line front-end: solve, simulate, verify, compare, sweep, calibrate and serve.

Exit codes: 0 success, 1 configuration or missing input, 2 convergence failure
or escaped particles, 2 + k when ``verify`` finds k failed checks.
"""

from __future__ import annotations

import argparse
import logging
from collections.abc import Sequence

from app.exceptions import (
    ConfigInvalid,
    EscapedDomain,
    MissingCalibration,
    MissingRun,
    NonConvergence,
    PLaplaceLabError,
    ZeroMass,
)
from app.logging_config import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CONVERGENCE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plflow", description="p-Laplace gradient flow laboratory")
    parser.add_argument("--log-level", default=None, help="Overrides global.log_level")
    commands = parser.add_subparsers(dest="command", required=True)

    solve = commands.add_parser("solve", help="Solve an experiment into a run directory")
    solve.add_argument("-c", "--config", required=True, help="Experiment JSON file")
    solve.add_argument("-o", "--out", required=True, help="Run directory to create")

    simulate = commands.add_parser("simulate", help="Propagate particles on a solved run")
    simulate.add_argument("-r", "--run", required=True)
    simulate.add_argument("-N", type=int, default=100_000)
    simulate.add_argument("--seed", type=int, default=42)
    simulate.add_argument("--substeps", type=int, default=1)
    simulate.add_argument("--workers", type=int, default=None)

    verify = commands.add_parser("verify", help="Evaluate the estimates on a run")
    verify.add_argument("-r", "--run", required=True)

    compare = commands.add_parser("compare", help="Compare particle laws with the PDE density")
    compare.add_argument("-r", "--run", required=True)

    sweep = commands.add_parser("sweep", help="Convergence sweep over one parameter")
    sweep.add_argument("-c", "--config", required=True)
    sweep.add_argument("--axis", required=True, choices=["n", "dt", "N", "delta", "epsilon", "refinement"])
    sweep.add_argument("--levels", type=int, default=3, help="Levels, or seeds for the refinement axis")
    sweep.add_argument("--values", type=float, nargs="+", default=None, help="Explicit level values")
    sweep.add_argument("-o", "--out", default=".")

    calibrate = commands.add_parser("calibrate", help="Write oracle constants for (p, d) pairs")
    calibrate.add_argument("--p", type=float, nargs="+", required=True)
    calibrate.add_argument("--d", type=int, nargs="+", default=[1, 2], choices=[1, 2])
    calibrate.add_argument("--out", default=None, help="Defaults to paths.oracle_constants")

    serve = commands.add_parser("serve", help="Start the read-only run service")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    # Imported lazily so that --help stays fast.
    from app.services import runs, sweep

    if args.command == "solve":
        run_dir = runs.cmd_solve(args.config, args.out)
        print(run_dir)
    elif args.command == "simulate":
        print(runs.cmd_simulate(args.run, args.N, args.seed, args.substeps, args.workers))
    elif args.command == "verify":
        path, report = runs.cmd_verify(args.run)
        print(path)
        failed = len(report.failed)
        return EXIT_OK if failed == 0 else EXIT_CONVERGENCE + failed
    elif args.command == "compare":
        print(runs.cmd_compare(args.run)[0])
    elif args.command == "sweep":
        print(sweep.cmd_sweep(args.config, args.axis, args.levels, args.out, args.values))
    elif args.command == "calibrate":
        print(runs.cmd_calibrate(args.p, args.d, args.out))
    elif args.command == "serve":
        import uvicorn

        from app.config_loader import get_config

        service = get_config()["service"]
        uvicorn.run("app.main:app", host=args.host or service["host"], port=args.port or service["port"])
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return _dispatch(args)
    except (ConfigInvalid, MissingRun, MissingCalibration) as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except (NonConvergence, EscapedDomain, ZeroMass) as e:
        logger.error("%s", e)
        return EXIT_CONVERGENCE
    except PLaplaceLabError as e:
        logger.error("%s", e)
        return EXIT_CONFIG
