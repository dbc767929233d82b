"""Command-line entry point.

    ctrlab <command> [--config PATH] [--out DIR] [--seeds a,b,c] [--assert]

Commands map one-to-one onto the harness: gradcheck, train, sweep-beta,
sweep-alpha, compare-losses, focal, negsample, bias-report, landscape.
Exit codes: 0 success, 2 failed assertion/gate, 1 error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import CtrlabError
from .harness import COMMANDS, load_config


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("seeds must be comma-separated integers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctrlab",
        description="Loss-combination experiments for CTR models under sparse positives.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", default=None,
                       help="YAML experiment config; omit for built-in defaults")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seeds", type=_parse_seeds, default=None,
                       help="comma-separated run seeds (overrides config)")
        p.add_argument("--assert", dest="assert_checks", action="store_true",
                       help="exit 2 when a directional check fails")
        if name == "gradcheck":
            p.add_argument("--loss", dest="loss_filter", default=None,
                           help="restrict the audit to one loss kind")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "out": args.out,
        "seeds": args.seeds,
        "assert_checks": args.assert_checks,
        "loss_filter": getattr(args, "loss_filter", None),
    }
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except CtrlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
