"""``bridgesim`` command line.

Exit status: 0 on success, 2 for configuration errors, 1 for numerical failures.
"""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import numpy as np

from ..auxiliary import TableError
from ..linalg_ode import IntegrationError, LyapunovError, NotSPDError
from ..reference import RejectionError
from ..weights import WeightError
from .config import AUXILIARIES, ConfigError, load_config
from .runners import FIGURES, figure_config, run_compare, run_figure, run_mh, run_simulate, run_tables

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2
NUMERICAL_ERRORS = (IntegrationError, LyapunovError, NotSPDError, TableError, WeightError,
                    RejectionError, FloatingPointError, np.linalg.LinAlgError)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value file")
    p.add_argument("--seed", type=int)
    p.add_argument("--h", type=float, help="grid step")
    p.add_argument("--paths", type=int)
    p.add_argument("--proposal", metavar="NAME", help="proposal name, or a comma-separated list")
    p.add_argument("--aux", choices=AUXILIARIES)
    p.add_argument("--sigma-policy", choices=("constant-end", "interpolate"))
    p.add_argument("--t0", type=float)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--threads", type=int)
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override any configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgesim", description="Simulate diffusion bridges.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "simulate proposal paths and their log weights"),
        ("compare", "compare proposals by ESS, IS moments and mean-path distance"),
        ("mh", "independence Metropolis-Hastings over proposal bridges"),
        ("tables", "dump backward-filter tables"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "mh":
            p.add_argument("--iterations", type=int)
    p = sub.add_parser("figure", help="reproduce a figure as SVG and CSV")
    p.add_argument("name", choices=tuple(FIGURES))
    _common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError("set", f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key in ("seed", "h", "paths", "proposal", "aux", "sigma_policy", "t0", "out", "threads", "iterations"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _overrides(args)
        if args.command == "figure":
            cfg = figure_config(args.name, args.config, overrides)
            run_figure(args.name, cfg)
            return EXIT_OK
        cfg = load_config(args.config, overrides)
        if args.command == "simulate":
            run_simulate(cfg)
        elif args.command == "compare":
            run_compare(cfg)
        elif args.command == "mh":
            run_mh(cfg)
        else:
            run_tables(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        # remaining precondition failures stem from the chosen settings
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK
