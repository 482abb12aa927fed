"""Timing comparison of the two resolvent kernel backends.

The regularized-wall resolvent is the one per-node scalar iteration in the
package; everything else is sparse linear algebra.  This script times the
numba scalar loop against the pure-numpy masked iteration on identical
inputs, checks that they agree bitwise, and prints a small table.

Run:  python3 benchmarks/bench_resolvent.py [--sizes 1e4,1e5,1e6] [--repeat 5]
"""

import argparse
import time

import numpy as np

from bschsim._accel import (HAS_NUMBA, active_backend, resolvent_log_numba,
                            resolvent_log_numpy)


def time_call(func, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        func(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="1e4,1e5,1e6",
                        help="comma-separated array sizes")
    parser.add_argument("--repeat", type=int, default=5,
                        help="timing repetitions (best is reported)")
    parser.add_argument("--lam", type=float, default=1e-3,
                        help="regularization level of the resolvent")
    args = parser.parse_args()
    sizes = [int(float(s)) for s in args.sizes.split(",")]

    print(f"active backend: {active_backend()} (numba importable: {HAS_NUMBA})")
    rng = np.random.default_rng(0)
    if HAS_NUMBA:
        # compile outside the timed region
        resolvent_log_numba(rng.normal(size=8), args.lam, 1.0)

    header = f"{'n':>10}  {'numpy [ms]':>12}  {'numba [ms]':>12}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        # mix interior values with near-wall ones, where the iteration works
        s = np.concatenate([
            3.0 * rng.standard_normal(n // 2),
            rng.choice([-1.0, 1.0], n - n // 2) * (1.0 + rng.random(n - n // 2)),
        ])
        rng.shuffle(s)
        t_numpy = time_call(resolvent_log_numpy, (s, args.lam, 1.0),
                            args.repeat)
        if HAS_NUMBA:
            t_numba = time_call(resolvent_log_numba, (s, args.lam, 1.0),
                                args.repeat)
            a = resolvent_log_numpy(s, args.lam, 1.0)
            b = resolvent_log_numba(s, args.lam, 1.0)
            # libm atanh and numpy arctanh differ by an ulp on some inputs,
            # so the twins may part ways by a couple of ulps, never more
            ulps = float(np.max(np.abs(a - b) / np.spacing(np.abs(a) + 1e-300)))
            if ulps > 4.0:
                print(f"{n:>10}  backends disagree by {ulps:.0f} ulps, "
                      "benchmark void")
                return 1
            print(f"{n:>10}  {1e3 * t_numpy:12.3f}  {1e3 * t_numba:12.3f}"
                  f"  {t_numpy / t_numba:8.2f}x   (max gap {ulps:.1f} ulp)")
        else:
            print(f"{n:>10}  {1e3 * t_numpy:12.3f}  {'n/a':>12}  {'n/a':>8}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
