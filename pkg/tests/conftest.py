import numpy as np
import pytest

from focalcvae.rng import Rng
from focalcvae.tensor import Tensor, default_dtype


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def f64():
    """Run the test with float64 tensors (gradient checks, exactness oracles)."""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def randn(rng):
    """Factory for random leaf tensors that require grad."""

    def make(*shape, scale=1.0, requires_grad=True):
        return Tensor(rng.normal(shape) * scale, requires_grad=requires_grad)

    return make
