"""Central finite-difference oracle for gradient checks.

Independent of the autodiff engine: perturbs raw numpy buffers one
element at a time and re-evaluates the scalar function.
"""

from __future__ import annotations

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f(x) wrt every element of x.

    `f` must read `x` by value on each call; `x` must be float64.
    """
    assert x.dtype == np.float64, "finite differences need 64-bit buffers"
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Global relative error between two gradient arrays."""
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)
