"""hvolterra command line: run verification suites and write reports.

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .report import emit
from .suites import list_suites, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvolterra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the suite named in a scenario config")
    run.add_argument("config", help="YAML scenario file")
    run.add_argument("--suite", help="override the suite named in the config")
    run.add_argument("--seed", type=int, help="replace the config seeds with one seed")
    run.add_argument("--out", default="reports", help="output directory (default: reports)")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--tolerance-scale", type=float, default=1.0,
                     help="multiply every upper-bound tolerance by this factor")
    run.add_argument("--quiet", action="store_true", help="suppress the per-check summary")
    sub.add_parser("list-suites", help="print the suite names")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "list-suites":
        print(list_suites())
        return EXIT_OK
    try:
        cfg = load_config(args.config).with_overrides(args.suite, args.seed)
        result = run_suite(cfg, args.tolerance_scale)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        paths = emit(result, args.out, args.format, cfg.seeds)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        for c in result.checks:
            print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<40} {c.value:.3e}  tol {c.tol_text}")
        for p in paths:
            print(f"wrote {p}")
    return EXIT_OK if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
