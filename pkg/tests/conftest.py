import os

# single-threaded BLAS: faster at these sizes and bit-reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

try:
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=1)
except ImportError:  # pragma: no cover
    pass

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient(fn, x, h=1e-6):
    """Central-difference gradient of a scalar fn at a flat float64 array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad
