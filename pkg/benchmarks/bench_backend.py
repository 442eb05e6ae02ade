"""Compare the compiled likelihood core against the numpy fallback.

Run:  python3 benchmarks/bench_backend.py [--particles M] [--data N]
"""

import argparse
import time

import numpy as np

from qbayes._backend import _ref

try:
    from qbayes._backend import _core
except ImportError:
    _core = None


def timeit(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


CASES = [
    ("precession loglike_sum", 0, 1, "loglike_sum"),
    ("multi-cosine-4d loglike_sum", 1, 4, "loglike_sum"),
    ("multi-cosine-4d grad_loglike_sum", 1, 4, "grad_loglike_sum"),
    ("ramsey grad_loglike_sum", 5, 2, "grad_loglike_sum"),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--particles", type=int, default=20_000)
    ap.add_argument("--data", type=int, default=250)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"M={args.particles} particles, N={args.data} data")
    header = f"{'case':36s} {'numpy':>10s} {'compiled':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for label, kind, dim, fn_name in CASES:
        thetas = np.ascontiguousarray(rng.uniform(0.1, 0.9, (args.particles, dim)))
        c1 = rng.uniform(0.1, 50.0, args.data)
        c2 = np.zeros(args.data)
        outcomes = rng.integers(0, 2, args.data)
        t_ref = timeit(getattr(_ref, fn_name), kind, np.array([]), thetas, c1, c2, outcomes)
        if _core is None:
            print(f"{label:36s} {t_ref * 1e3:9.1f}ms {'n/a':>10s}")
            continue
        t_core = timeit(getattr(_core, fn_name), kind, np.array([]), thetas, c1, c2, outcomes)
        print(f"{label:36s} {t_ref * 1e3:9.1f}ms {t_core * 1e3:9.1f}ms {t_ref / t_core:7.1f}x")


if __name__ == "__main__":
    main()
