import argparse
import logging
import sys
from pathlib import Path

from fmapshield import __version__
from fmapshield.commands import (
    calibrate,
    compare,
    estimate,
    harden,
    inject,
    report,
    select,
    train,
    verify,
)
from fmapshield.config import settings
from fmapshield.core.errors import EXIT_CODES, FmapShieldError, InvalidRequestError
from fmapshield.core.logging import setup_logging

logger = logging.getLogger(__name__)

COMMANDS = (train, calibrate, inject, estimate, compare, select, harden, verify, report)


def _epilog() -> str:
    lines = ["exit codes:"]
    lines += [f"  {code}  {meaning}" for code, meaning in sorted(EXIT_CODES.items())]
    lines.append("")
    lines.append("pipeline: train -> calibrate -> inject -> estimate -> compare/select")
    lines.append("          -> harden -> verify -> report")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset after it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument(
        "--threads", type=int, default=argparse.SUPPRESS, help="worker cap for campaigns"
    )
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="DEBUG, INFO, WARNING")

    parser = argparse.ArgumentParser(
        prog="fmapshield",
        description="Feature-map vulnerability estimation and selective hardening for CNNs.",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command in COMMANDS:
        command.register(subparsers, common)
    return parser


def _apply_overrides(args: argparse.Namespace) -> None:
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise InvalidRequestError("--threads must be at least 1")
        settings.threads = args.threads
    if getattr(args, "seed", None) is not None:
        settings.seed = args.seed
    if getattr(args, "out", None) is not None:
        settings.out_dir = args.out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(getattr(args, "log_level", None), command=args.command)
    try:
        _apply_overrides(args)
        return args.handler(args)
    except FmapShieldError as exc:
        logger.debug("Command failed", exc_info=True)
        print(f"fmapshield {args.command}: {exc.category}: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.exception(f"Unhandled exception: {exc}")
        print(f"fmapshield {args.command}: unexpected error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
