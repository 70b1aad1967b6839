import numpy as np
import pytest


def fd_gradient(f, x, h=1e-6, index=None):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    coords = range(flat.size) if index is None else index
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    """Max-norm relative error of ``a`` against reference ``b``."""
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
