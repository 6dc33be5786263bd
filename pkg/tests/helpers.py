"""Shared test utilities: the finite-difference gradient oracle and a
relative-error measure.  The oracle only ever evaluates forward passes,
so it stays independent of the backward implementation it checks."""

import numpy as np


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar function f with respect to x.

    ``f`` takes no arguments and must read the current contents of ``x``;
    entries are perturbed in place and restored.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """max |a-b| / max(|a|, |b|, floor); the floor keeps near-zero entries
    from turning roundoff into spurious relative error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
