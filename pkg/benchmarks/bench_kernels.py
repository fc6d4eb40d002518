"""Compare the numba-jitted kernels against the pure-numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--rows N] [--cols N] [--reps N]
"""

import argparse
import time

import numpy as np

from dbswin import kernels


def bench(fn, args, reps):
    fn(*args)  # warmup / jit compile
    best = float("inf")
    for _ in range(reps):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = rng.normal(size=(args.rows, args.cols))
    gy = rng.normal(size=(args.rows, args.cols))
    gamma = rng.normal(size=args.cols)
    beta = rng.normal(size=args.cols)

    cases = [
        ("softmax_rows", "softmax_rows", (x,)),
        ("softmax_rows_grad", "softmax_rows_grad",
         (kernels.softmax_rows(x), gy)),
        ("layernorm_rows", "layernorm_rows", (x, gamma, beta, 1e-5)),
        ("gelu", "gelu", (x,)),
        ("gelu_grad", "gelu_grad", (x, gy)),
        ("sigmoid", "sigmoid", (x,)),
    ]

    if not kernels.numba_available():
        print("numba unavailable; nothing to compare")
        return

    print(f"rows={args.rows} cols={args.cols} (best of {args.reps})")
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for label, name, call_args in cases:
        kernels.select_backend(False)
        t_np = bench(getattr(kernels, name), call_args, args.reps)
        kernels.select_backend(True)
        t_nb = bench(getattr(kernels, name), call_args, args.reps)
        print(f"{label:<20}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}"
              f"{t_np / t_nb:>10.2f}x")
    kernels.select_backend(True)


if __name__ == "__main__":
    main()
