import numpy as np
import pytest

from ditlab.diffcore import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, lo=None) -> Tensor:
    """A float64 requires-grad tensor with values safely away from kinks."""
    data = rng.standard_normal(shape)
    if lo is not None:
        data = np.abs(data) + lo
    return Tensor(data, requires_grad=True, dtype=np.float64)
