"""Hot inner-loop kernels with numba acceleration and pure-numpy fallbacks.

The numba path is used by default whenever numba imports cleanly.  Setting
the environment variable ``FLOWDISTILL_DISABLE_NUMBA=1`` before import
selects the pure-numpy implementations instead (useful for debugging and
for the benchmark in ``benchmarks/bench_kernels.py``).  Both paths compute
the same quantities; the numpy fallbacks chunk their work so memory stays
bounded.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("FLOWDISTILL_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

NUMBA_AVAILABLE = False
if not _DISABLE:
    try:
        from numba import njit

        NUMBA_AVAILABLE = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass


# ---------------------------------------------------------------------------
# pure-numpy implementations


def nearest_codes_np(points: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code (squared euclidean) for each point.

    Ties break to the lowest code index.  Chunked over rows so the
    (chunk, V, d) distance block stays small.
    """
    n = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    chunk = max(1, int(2**22 // max(1, codes.size)))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        diff = points[lo:hi, None, :] - codes[None, :, :]
        d2 = np.einsum("nvd,nvd->nv", diff, diff)
        out[lo:hi] = np.argmin(d2, axis=1)
    return out


def cluster_sums_np(points: np.ndarray, labels: np.ndarray, k: int):
    """Per-cluster vector sums and counts for integer labels in [0, k)."""
    d = points.shape[1]
    sums = np.zeros((k, d), dtype=points.dtype)
    np.add.at(sums, labels, points)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


def joint_counts_np(a: np.ndarray, b: np.ndarray, ka: int, kb: int) -> np.ndarray:
    """Contingency table of two aligned integer label streams."""
    flat = np.bincount(a.astype(np.int64) * kb + b.astype(np.int64), minlength=ka * kb)
    return flat.reshape(ka, kb)


# ---------------------------------------------------------------------------
# numba implementations

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def nearest_codes_nb(points, codes):
        n, d = points.shape
        v = codes.shape[0]
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = -1
            best_d2 = np.inf
            for c in range(v):
                acc = 0.0
                for j in range(d):
                    diff = points[i, j] - codes[c, j]
                    acc += diff * diff
                if acc < best_d2:
                    best_d2 = acc
                    best = c
            out[i] = best
        return out

    @njit(cache=True)
    def cluster_sums_nb(points, labels, k):
        n, d = points.shape
        sums = np.zeros((k, d), dtype=points.dtype)
        counts = np.zeros(k, dtype=np.int64)
        for i in range(n):
            lab = labels[i]
            for j in range(d):
                sums[lab, j] += points[i, j]
            counts[lab] += 1
        return sums, counts

    @njit(cache=True)
    def joint_counts_nb(a, b, ka, kb):
        out = np.zeros((ka, kb), dtype=np.int64)
        for i in range(len(a)):
            out[a[i], b[i]] += 1
        return out

    nearest_codes = nearest_codes_nb
    cluster_sums = cluster_sums_nb
    joint_counts = joint_counts_nb
else:
    nearest_codes = nearest_codes_np
    cluster_sums = cluster_sums_np
    joint_counts = joint_counts_np


def backend() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return "numba" if NUMBA_AVAILABLE else "numpy"
