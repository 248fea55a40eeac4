"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np

EPS = 1e-4
TOL = 1e-4
FLOOR = 1e-6


def numeric_grad(f, x, eps=EPS):
    """d f() / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(num, ana, floor=FLOOR):
    """Max abs difference scaled by the larger gradient magnitude (floored)."""
    num, ana = np.asarray(num), np.asarray(ana)
    scale = max(np.max(np.abs(num), initial=0.0), np.max(np.abs(ana), initial=0.0), floor)
    return float(np.max(np.abs(num - ana), initial=0.0) / scale)
