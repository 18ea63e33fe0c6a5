"""Command line entry point: ``bench <experiment> [--config ...] [--out ...]``.

``--check`` evaluates the acceptance thresholds carried in the configuration
and sets a nonzero exit code if any is violated.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bench import EXPERIMENTS, RUNNERS, load_config, print_checks


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Run the conservation/convergence benchmark experiments "
                    "of the two-level EMAC Navier-Stokes solver.")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", default=None,
                        help="JSON file overriding the default configuration")
        sp.add_argument("--out", default=None,
                        help="output directory (default: bench-out/<name>)")
        sp.add_argument("--check", action="store_true",
                        help="evaluate acceptance thresholds; exit nonzero "
                             "on violation")
        sp.add_argument("--dump-config", action="store_true",
                        help="print the effective configuration and exit")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    config = load_config(args.experiment, args.config)
    if args.dump_config:
        json.dump(config, sys.stdout, indent=2, sort_keys=True)
        print()
        return 0
    out_dir = args.out or f"bench-out/{args.experiment}"
    run, check = RUNNERS[args.experiment]
    print(f"running {args.experiment} -> {out_dir}")
    result, outputs = run(config, out_dir)
    print(f"wrote {len(outputs)} file(s) to {out_dir}")
    if args.check:
        ok = print_checks(check(result, config))
        return 0 if ok else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
