"""Command-line entry point: ``fedlm run | sweep | time-to-target | inspect-checkpoint``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from fedlm.checkpoint import describe_checkpoint
from fedlm.errors import FedLMError
from fedlm.harness import (
    DEFAULT_GRIDS,
    OUTPUT_ROOT_ENV,
    PRESETS,
    load_spec,
    run_experiment,
    sweep,
    time_to_target,
)

log = logging.getLogger("fedlm")


def _spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="YAML experiment spec (defaults if omitted)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one spec field; repeatable",
    )
    p.add_argument(
        "--preset",
        dest="presets",
        action="append",
        default=[],
        choices=sorted(PRESETS),
        help="apply a named preset before overrides; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlm",
        description="Federated language-model pre-training simulator.",
        epilog=f"Run directories default to ${OUTPUT_ROOT_ENV}/<run.name> (or ./runs).",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _spec_args(run)
    run.add_argument("--out", help="run directory")
    run.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    run.add_argument("--stop-after", type=int, help="stop after this many rounds")

    sw = sub.add_parser("sweep", help="run one experiment per grid value")
    _spec_args(sw)
    sw.add_argument(
        "--grid",
        required=True,
        metavar="SECTION.KEY[=V1,V2,...]",
        help="values to sweep; a bare key uses its default grid",
    )
    sw.add_argument("--out", help="sweep root directory")
    sw.add_argument("--target", type=float, help="also report time to this perplexity")

    ttt = sub.add_parser("time-to-target", help="simulated seconds to reach a perplexity")
    ttt.add_argument("csv", help="rounds.csv of a run")
    ttt.add_argument("target", type=float)

    ins = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header and table")
    ins.add_argument("path")
    return parser


def _parse_grid(text: str) -> tuple[str, list]:
    if "=" not in text:
        if text.strip() in DEFAULT_GRIDS:
            return text.strip(), list(DEFAULT_GRIDS[text.strip()])
        raise FedLMError(
            f"--grid {text!r} is not of the form section.key=v1,v2 "
            f"(keys with a default grid: {', '.join(sorted(DEFAULT_GRIDS))})"
        )
    key, values = text.split("=", 1)
    return key.strip(), [yaml.safe_load(v) for v in values.split(",") if v.strip()]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        if args.command == "run":
            spec = load_spec(args.config, args.overrides, args.presets)
            res = run_experiment(spec, args.out, resume=args.resume, stop_after=args.stop_after)
            if res.summary:
                print(json.dumps({"out_dir": str(res.out_dir), **res.summary}, sort_keys=True))
            else:
                print(json.dumps({"out_dir": str(res.out_dir), "stopped": True}))
        elif args.command == "sweep":
            spec = load_spec(args.config, args.overrides, args.presets)
            key, values = _parse_grid(args.grid)
            for row in sweep(spec, key, values, args.out, args.target):
                print(json.dumps(row, sort_keys=True))
        elif args.command == "time-to-target":
            t = time_to_target(args.csv, args.target)
            print("none" if t is None else repr(t))
        else:
            print(json.dumps(describe_checkpoint(args.path), indent=2))
    except FedLMError as exc:
        print(f"fedlm: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
