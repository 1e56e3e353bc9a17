import numpy as np
import pytest

from scadavae import kernels


def dyadic(rng, shape, lo=-64, hi=64):
    """Integers / 16: every product and partial sum stays exactly representable."""
    return rng.integers(lo, hi, size=shape).astype(np.float64) / 16.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)
