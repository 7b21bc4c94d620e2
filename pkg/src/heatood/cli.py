"""``heatood`` command line.

Exit codes: 0 success, 1 configuration / input / format error, 2 a stage
input is missing, 3 an artifact fails its manifest digest check.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigParseError, load_config
from .errors import ConfigurationError, HeatoodError
from .pipeline import PIPELINE, STAGE_FUNCS, DigestMismatch, StageInputMissing, run_pipeline, run_stage

EXIT_OK, EXIT_ERROR, EXIT_MISSING, EXIT_DIGEST = 0, 1, 2, 3

SUBCOMMANDS = ("train-classifier", "build-targets", "train-decoder", "score", "eval", "visualize",
               "ablate-oodsize", "lighting", "all")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value experiment file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="run directory (default: config 'out' or ./run)")
    common.add_argument("--seed", type=_u64, help="global seed for every stochastic stage")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")

    parser = argparse.ArgumentParser(prog="heatood", description="Heatmap-based OOD detection experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {name: (STAGE_FUNCS[name].__doc__ or "").strip().splitlines()[0] for name in STAGE_FUNCS}
    helps["all"] = f"run {', '.join(PIPELINE)} in order"
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps.get(name, ""), description=helps.get(name, ""))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, out=args.out)
        if args.command == "all":
            run_pipeline(cfg)
        else:
            run_stage(cfg, args.command)
    except ConfigParseError as exc:
        print(f"heatood: config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except StageInputMissing as exc:
        print(f"heatood: stage {exc.stage!r} cannot run, missing input: {', '.join(exc.paths)}", file=sys.stderr)
        return EXIT_MISSING
    except DigestMismatch as exc:
        print(f"heatood: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except (HeatoodError, ConfigurationError, OSError) as exc:
        print(f"heatood: stage {getattr(exc, 'stage', None) or args.command!r} failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
