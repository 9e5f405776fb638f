#!/usr/bin/env python3
"""Benchmark the compiled hinge-loss coordinate-descent kernel against the
pure-Python fallback.

The weighted hinge solve is the inner loop of backward outcome-weighted
learning (stages x folds x regularisation grid), so this is the kernel the
compiled extension exists for.  Run:

    python benchmarks/bench_hinge.py
"""

import time

import numpy as np

from dtrlab import _hinge_py

try:
    from dtrlab import _hinge_cd

    HAVE_COMPILED = True
except ImportError:
    _hinge_cd = None
    HAVE_COMPILED = False


def problem(seed, n, p):
    rng = np.random.default_rng(seed)
    X = np.hstack([rng.normal(size=(n, p)), np.ones((n, 1))])
    truth = rng.normal(size=p + 1)
    y = np.where(X @ truth + 0.5 * rng.normal(size=n) > 0, 1.0, -1.0)
    ub = rng.uniform(0.0, 2.0, n)
    return X, y, ub


def bench(fn, args, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main():
    print(f"compiled extension available: {HAVE_COMPILED}")
    print(f"{'case':<28} {'python':>10} {'compiled':>10} {'speedup':>8}")
    for n, p, repeats in [(200, 3, 5), (1000, 3, 3), (1000, 10, 3),
                          (4000, 5, 2)]:
        X, y, ub = problem(0, n, p)
        t_py, ref = bench(_hinge_py.linear_cd, (X, y, ub, 1e-4, 2000),
                          repeats)
        line = f"linear n={n:<5} p={p:<3}"
        if HAVE_COMPILED:
            t_c, fast = bench(_hinge_cd.linear_cd, (X, y, ub, 1e-4, 2000),
                              repeats)
            assert np.allclose(ref[0], fast[0], atol=1e-10)
            print(f"{line:<28} {t_py:>9.4f}s {t_c:>9.4f}s "
                  f"{t_py / t_c:>7.1f}x")
        else:
            print(f"{line:<28} {t_py:>9.4f}s {'-':>10} {'-':>8}")
    for n, repeats in [(200, 5), (600, 3), (1200, 2)]:
        X, y, ub = problem(1, n, 4)
        K = X @ X.T + 1.0
        t_py, ref = bench(_hinge_py.kernel_cd, (K, y, ub, 1e-4, 2000),
                          repeats)
        line = f"kernel n={n:<5}"
        if HAVE_COMPILED:
            t_c, fast = bench(_hinge_cd.kernel_cd, (K, y, ub, 1e-4, 2000),
                              repeats)
            assert np.allclose(ref[0], fast[0], atol=1e-10)
            print(f"{line:<28} {t_py:>9.4f}s {t_c:>9.4f}s "
                  f"{t_py / t_c:>7.1f}x")
        else:
            print(f"{line:<28} {t_py:>9.4f}s {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
