"""Command-line entry point: ``cosmicbell {analyze,simulate,spacetime,rng}``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConvergenceError, ValidationError

log = logging.getLogger("cosmicbell")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosmicbell", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "analyze": "CH statistic, no-signaling tests, biases and PBR p-value bounds",
        "simulate": "sample trial streams from a quantum model or a counts table",
        "spacetime": "star geometry, spacelike margins and lookback times",
        "rng": "digitize photon time tags into random bits",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # imported late so `--help` stays fast
    from .pipeline import run_command
    try:
        run_command(args.command, args.config, args.out, args.seed)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    print(f"wrote {args.out}/report.json")
    return EXIT_OK
