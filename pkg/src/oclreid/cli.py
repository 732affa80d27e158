"""Command-line entry point: ``oclreid run | compare | stream``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ConfigError
from .runner import STRATEGIES, RunConfig, compare, format_table, run, write_artifacts
from .simstream import load_preset, write_stream

EXIT_CONFIG = 2
EXIT_IO = 3


def _add_common(p: argparse.ArgumentParser, multi: bool = False):
    p.add_argument("--config", metavar="PATH", help="JSON (or YAML) file with RunConfig fields")
    p.add_argument("--preset", metavar="NAME", help="scenario preset (corridor, room)")
    if multi:
        p.add_argument("--strategy", metavar="NAME", action="append", choices=STRATEGIES,
                       help="repeatable; default: all of fixed, naive, reservoir")
        p.add_argument("--seed", metavar="INT", type=int, action="append", help="repeatable; default: 0 1 2")
    else:
        p.add_argument("--strategy", metavar="NAME", choices=STRATEGIES)
        p.add_argument("--seed", metavar="INT", type=int)
    p.add_argument("--mode", metavar="NAME", choices=("deterministic", "concurrent"))
    p.add_argument("--label-source", metavar="NAME", choices=("lifecycle", "truth"))
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--dump-memory", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oclreid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="run one strategy on one scenario"))
    _add_common(sub.add_parser("compare", help="mean and std over seeds per strategy"), multi=True)
    s = sub.add_parser("stream", help="write a scenario stream and its truth sidecar")
    s.add_argument("--preset", metavar="NAME", default="corridor")
    s.add_argument("--seed", metavar="INT", type=int, default=0)
    s.add_argument("--out", metavar="PATH", required=True)
    return parser


def _base_config(args) -> dict:
    data = RunConfig.from_file(args.config).to_dict() if args.config else {}
    overrides = {
        "scenario": args.preset,
        "mode": args.mode,
        "label_source": args.label_source,
        "out": args.out,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.dump_memory:
        data["dump_memory"] = True
    return data


def cmd_run(args) -> int:
    data = _base_config(args)
    if args.strategy is not None:
        data["strategy"] = args.strategy
    if args.seed is not None:
        data["seed"] = args.seed
    config = RunConfig.from_dict(data)
    arts = run(config)
    if config.out:
        write_artifacts(arts, Path(config.out))
    print("\n".join(arts.metrics))
    print(arts.acc.to_text())
    return 0


def cmd_compare(args) -> int:
    data = _base_config(args)
    strategies = args.strategy or ["fixed", "naive", "reservoir"]
    seeds = args.seed or [0, 1, 2]
    configs = [RunConfig.from_dict({**data, "strategy": st, "seed": sd, "out": None})
               for st in strategies for sd in seeds]
    table = compare(configs)
    print(format_table(table))
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "compare.json").write_text(json.dumps(table, indent=2))
            (out / "compare.txt").write_text(format_table(table) + "\n")
        except OSError as exc:
            raise ConfigError(f"cannot write to {out}: {exc}") from exc
    return 0


def cmd_stream(args) -> int:
    n = write_stream(load_preset(args.preset, seed=args.seed), args.out)
    print(f"wrote {n} frames to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "compare": cmd_compare, "stream": cmd_stream}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
