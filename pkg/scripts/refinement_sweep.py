"""Run one suite over a list of grid sizes and write its refinement table.

    python scripts/refinement_sweep.py configs/ou.yaml --levels 16 32 64 128
"""
import argparse
import sys
from dataclasses import replace

from hvolterra.config import ConfigError, load_config
from hvolterra.report import refinement_csv, write_atomic
from hvolterra.suites import run_suite


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--levels", type=int, nargs="+", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    args = p.parse_args(argv)
    try:
        cfg = replace(load_config(args.config), refinement_levels=tuple(args.levels))
        result = run_suite(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = refinement_csv(result)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
