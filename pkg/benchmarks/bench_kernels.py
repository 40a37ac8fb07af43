"""Benchmark the compiled kernels against the NumPy fallback.

Runs every hot kernel on realistic pipeline shapes with both backends,
verifies the outputs agree bit for bit, and prints best-of-N wall times
with the speedup.  Usage:

    python benchmarks/bench_kernels.py [--repeats 7] [--points 200000]
"""

import argparse
import sys
import time

import numpy as np

from pgfusion.backend import backend_module


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(points):
    rng = np.random.default_rng(0)
    n = points
    rows, cols = 128, 128
    iy = rng.integers(0, rows, n)
    ix = rng.integers(0, cols, n)
    z = rng.normal(0.0, 1.0, n)
    inten = rng.random(n)
    vals16 = rng.standard_normal((16, n))
    vals3 = rng.standard_normal((3, n))
    x_conv = rng.standard_normal((16, rows, cols))
    w3 = rng.standard_normal((16, 16, 3, 3)) * 0.1
    bias = rng.standard_normal(16)
    x_pool = rng.standard_normal((8, rows, cols))
    x_up = rng.standard_normal((16, 32, 256))
    w_up = rng.standard_normal((8, 16, 3, 3)) * 0.1
    rv_rows = rng.integers(0, 32, n)
    rv_cols = rng.integers(0, 256, n)
    ranges = rng.uniform(0.5, 60.0, n)

    # convolutions sum in backend-specific order: tolerance instead of bits
    return [
        ("conv2d 16x16 3x3 128^2", lambda m: m.conv2d_fwd(x_conv, w3, bias, 1, 1, 1), 1e-12),
        ("conv_transpose x2 32x256", lambda m: m.conv_transpose2d_x2_fwd(x_up, w_up, None), 1e-12),
        ("maxpool 3x3 s1 128^2", lambda m: m.maxpool2d_fwd(x_pool, 3, 1), 0.0),
        ("rv_assign %dk pts" % (n // 1000), lambda m: m.rv_assign(rv_rows, rv_cols, ranges, 32, 256), 0.0),
        ("scatter_pillar %dk pts" % (n // 1000), lambda m: m.scatter_pillar(iy, ix, z, inten, rows, cols), 0.0),
        ("scatter_max 16ch %dk pts" % (n // 1000), lambda m: m.scatter_max(vals16, iy, ix, rows, cols), 0.0),
        ("scatter_sum_count 3ch", lambda m: m.scatter_sum_count(vals3, iy, ix, rows, cols), 0.0),
        ("count_cells %dk pts" % (n // 1000), lambda m: m.count_cells(iy, ix, rows, cols), 0.0),
    ]


def _agree(a, b, atol):
    if isinstance(a, tuple):
        return all(_agree(x, y, atol) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if atol == 0.0:
        return np.array_equal(a, b)
    return a.shape == b.shape and np.abs(a - b).max() <= atol


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7, help="best-of repetitions")
    parser.add_argument(
        "--points", type=int, default=200000, help="points for the scatter kernels"
    )
    args = parser.parse_args(argv)

    try:
        compiled = backend_module("compiled")
    except ImportError:
        print("compiled backend not built; nothing to compare", file=sys.stderr)
        return 1
    python = backend_module("python")

    print("%-28s %12s %12s %9s" % ("kernel", "compiled", "python", "speedup"))
    worst = float("inf")
    for name, call, atol in _cases(args.points):
        got_c = call(compiled)
        got_p = call(python)
        if not _agree(got_c, got_p, atol):
            print("%-28s BACKENDS DISAGREE" % name, file=sys.stderr)
            return 2
        t_c = _best_of(lambda: call(compiled), args.repeats)
        t_p = _best_of(lambda: call(python), args.repeats)
        ratio = t_p / t_c
        worst = min(worst, ratio)
        print("%-28s %9.3f ms %9.3f ms %8.1fx" % (name, t_c * 1e3, t_p * 1e3, ratio))
    print("all outputs agree; worst speedup %.1fx" % worst)
    return 0


if __name__ == "__main__":
    sys.exit(main())
