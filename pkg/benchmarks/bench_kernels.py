#!/usr/bin/env python3
"""Side-by-side timing of the numba kernels against their numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

The same dispatch is exercised at runtime: setting
FLOWDISTILL_DISABLE_NUMBA=1 makes the package use the numpy column.
"""

import time

import numpy as np

from flowdistill import kernels

if not kernels.NUMBA_AVAILABLE:
    raise SystemExit("numba is unavailable or disabled; nothing to compare")


def timeit(fn, *args, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def check_equal(a, b):
    if isinstance(a, tuple):
        return all(np.allclose(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    rng = np.random.default_rng(0)
    print("warming up JIT compilation...")
    pts = rng.standard_normal((64, 8))
    kernels.nearest_codes_nb(pts, pts[:8])
    kernels.cluster_sums_nb(pts, np.zeros(64, dtype=np.int64), 8)
    kernels.joint_counts_nb(np.zeros(64, np.int64), np.zeros(64, np.int64), 2, 2)

    print(f"{'kernel':<28} {'size':<22} {'numpy (ms)':>11} {'numba (ms)':>11} {'speedup':>8}")
    print("-" * 86)

    for n, v, d in [(2_000, 64, 16), (20_000, 256, 64)]:
        points = rng.standard_normal((n, d))
        codes = rng.standard_normal((v, d))
        t_np = timeit(kernels.nearest_codes_np, points, codes)
        t_nb = timeit(kernels.nearest_codes_nb, points, codes)
        assert check_equal(
            kernels.nearest_codes_np(points, codes), kernels.nearest_codes_nb(points, codes)
        )
        print(
            f"{'nearest_codes':<28} {f'{n}x{d}, {v} codes':<22} "
            f"{t_np * 1e3:>11.2f} {t_nb * 1e3:>11.2f} {t_np / t_nb:>7.1f}x"
        )

    for n, k, d in [(20_000, 64, 16), (100_000, 256, 64)]:
        points = rng.standard_normal((n, d))
        labels = rng.integers(0, k, n)
        t_np = timeit(kernels.cluster_sums_np, points, labels, k)
        t_nb = timeit(kernels.cluster_sums_nb, points, labels, k)
        assert check_equal(
            kernels.cluster_sums_np(points, labels, k), kernels.cluster_sums_nb(points, labels, k)
        )
        print(
            f"{'cluster_sums':<28} {f'{n}x{d}, k={k}':<22} "
            f"{t_np * 1e3:>11.2f} {t_nb * 1e3:>11.2f} {t_np / t_nb:>7.1f}x"
        )

    for n, ka, kb in [(100_000, 32, 12), (1_000_000, 256, 64)]:
        a = rng.integers(0, ka, n)
        b = rng.integers(0, kb, n)
        t_np = timeit(kernels.joint_counts_np, a, b, ka, kb)
        t_nb = timeit(kernels.joint_counts_nb, a, b, ka, kb)
        assert check_equal(
            kernels.joint_counts_np(a, b, ka, kb), kernels.joint_counts_nb(a, b, ka, kb)
        )
        print(
            f"{'joint_counts':<28} {f'{n}, {ka}x{kb}':<22} "
            f"{t_np * 1e3:>11.2f} {t_nb * 1e3:>11.2f} {t_np / t_nb:>7.1f}x"
        )


if __name__ == "__main__":
    main()
