import numpy as np
import pytest

from coat.tensor import Tensor


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def randn(gen, *shape, dtype="f64"):
    return Tensor(gen.standard_normal(shape), dtype)
