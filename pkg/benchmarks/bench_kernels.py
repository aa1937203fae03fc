"""Time the numba and numpy paths of every kernel.

Run ``python benchmarks/bench_kernels.py [--L 512] [--repeat 5]``.  The
numba path is compiled once before timing.  Prints one line per kernel with
the best wall time of each path and the speed-up.
"""

import argparse
import timeit

import numpy as np

from kneebench import kernels
from kneebench._accel import HAVE_NUMBA


def cases(L, rng):
    x = np.linspace(0.0, 1.0, L)
    y = np.sqrt(x) + rng.normal(0, 0.01, L)
    alphas = np.linspace(0.05, 1.0, 150)
    cand = np.arange(1, L - 1, max(1, L // 128))
    p = rng.random(L)
    d = y - x
    i = np.arange(1, L - 1)
    maxima = i[(d[i] > d[i - 1]) & (d[i] >= d[i + 1])]
    thr = d[maxima] - 0.01
    return {
        "ewm_batch": ((y, alphas), kernels.ewm_batch_nb, kernels.ewm_batch_np),
        "two_line_fits": ((x, y, kernels.BEST_FIT), kernels.two_line_fits_nb, kernels.two_line_fits_np),
        "three_line_scores": ((x, y, cand, kernels.LINEAR_FIT),
                              kernels.three_line_scores_nb, kernels.three_line_scores_np),
        "nms": ((p, 0.5, 10), kernels.nms_nb, kernels.nms_np),
        "kneedle_scan": ((d, maxima, thr), kernels.kneedle_scan_nb, kernels.kneedle_scan_np),
    }


def best_time(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--L", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {HAVE_NUMBA}; L = {args.L}")
    print(f"{'kernel':20s} {'numba [ms]':>12s} {'numpy [ms]':>12s} {'speed-up':>9s}")
    for name, (a, nb, npy) in cases(args.L, rng).items():
        nb(*a)  # compile
        t_nb = best_time(nb, a, args.repeat)
        t_np = best_time(npy, a, args.repeat)
        print(f"{name:20s} {1e3 * t_nb:12.4f} {1e3 * t_np:12.4f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
