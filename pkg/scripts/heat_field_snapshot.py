"""One realization of X(t, z) driven by the heat kernel, as CSV snapshots.

Columns: t, x1, value.  All snapshots share one draw of the noise.
"""
import argparse
import sys

import numpy as np

from hvolterra.chaos import evaluate
from hvolterra.randomfield import HomogeneousNoiseSpec, heat_box_half_width, heat_field_kernel, rf_X, write_field_snapshot


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--cells", type=int, default=32)
    p.add_argument("--gamma", default="gaussian", choices=["dirac", "gaussian", "exponential"])
    p.add_argument("--width", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--every", type=int, default=4, help="write every k-th time node")
    p.add_argument("--out", help="CSV path (default: stdout)")
    args = p.parse_args(argv)
    T = 1.0
    noise = HomogeneousNoiseSpec.uniform(args.N, T, heat_box_half_width(T), args.cells, 1, args.gamma, args.width)
    g = heat_field_kernel()
    g.check_domain(noise)
    basis = noise.basis
    rng = np.random.default_rng(args.seed)
    inc = rng.standard_normal((1, basis.N, basis.noise_dim)) * basis.sqrt_dt[None, :, None]
    snaps = []
    for n in range(args.every, args.N + 1, args.every):
        t = float(noise.time_grid[n])
        snaps.append((t, evaluate(rf_X(g, noise, t), inc)[0]))
    text = write_field_snapshot(args.out, noise, snaps)
    if args.out is None:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
