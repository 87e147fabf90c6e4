"""Command-line entry point: ``siltflow --experiment NAME [options]``."""
from __future__ import annotations

import argparse
import json
import sys

from .errors import InputError
from .harness import (
    EXIT_INVALID_PARAMS,
    EXIT_OK,
    EXIT_USAGE,
    REGISTRY,
    RunConfig,
    list_experiments,
    read_config,
    run,
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siltflow", description="Run a Monte Carlo experiment.")
    p.add_argument("--experiment", help="experiment name (see --list)")
    p.add_argument("--config", help="INI file with [run] and [params] sections")
    p.add_argument("--seed", type=int, help="master seed (64-bit)")
    p.add_argument("--replicas", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=["paper", "liouville"], help="drift contribution to log det")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="override one experiment parameter (repeatable)")
    p.add_argument("--list", action="store_true", help="print experiment schemas as JSON and exit")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list:
        json.dump(list_experiments(), sys.stdout, indent=2)
        print()
        return EXIT_OK
    try:
        cfg = read_config(args.config) if args.config else None
    except InputError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID_PARAMS
    name = args.experiment or (cfg.experiment if cfg else None)
    if name is None:
        print(f"--experiment is required; valid: {', '.join(REGISTRY)}", file=sys.stderr)
        return EXIT_USAGE
    params = dict(cfg.params) if cfg and cfg.experiment == name else {}
    for item in args.param:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"--param expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_INVALID_PARAMS
        params[key.strip()] = value.strip()
    try:
        rc = RunConfig(
            experiment=name,
            params=params,
            seed=args.seed if args.seed is not None else (cfg.seed if cfg else 0),
            replicas=args.replicas if args.replicas is not None else (cfg.replicas if cfg else None),
            workers=args.workers if args.workers is not None else (cfg.workers if cfg else 1),
            out=args.out or (cfg.out if cfg else "results"),
            mode=args.mode or (cfg.mode if cfg else "liouville"),
        )
    except InputError as exc:
        print(f"invalid parameters: {exc}", file=sys.stderr)
        return EXIT_INVALID_PARAMS
    return run(rc)


if __name__ == "__main__":
    sys.exit(main())
