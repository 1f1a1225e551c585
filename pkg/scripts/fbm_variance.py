"""E[X(t)^2] / t^{2H} for calibrated fBm kernels, as plot-ready CSV.

Columns: H, N, t, ratio, c_H.
"""
import argparse
import csv
import sys

from hvolterra.chaos import NoiseBasis
from hvolterra.kernels import calibrate_fbm, make_fbm_kernel
from hvolterra.xintegral import VolterraSpec, simulate_X


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--H", type=float, nargs="+", default=[0.3, 0.75])
    p.add_argument("--N", type=int, nargs="+", default=[32, 64, 128])
    p.add_argument("--times", type=float, nargs="+", default=[0.25, 0.5, 0.75, 1.0])
    args = p.parse_args(argv)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["H", "N", "t", "ratio", "c_H"])
    T = max(args.times)
    for H in args.H:
        c = calibrate_fbm(H, 1.0)
        g = make_fbm_kernel(H, None, c)
        for N in args.N:
            spec = VolterraSpec.build(g, NoiseBasis.uniform(N, T))
            for t in args.times:
                ratio = simulate_X(spec, t).second_moment() / t ** (2 * H)
                w.writerow([H, N, t, repr(float(ratio)), repr(c)])
    return 0


if __name__ == "__main__":
    sys.exit(main())
