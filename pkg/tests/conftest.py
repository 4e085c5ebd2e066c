import numpy as np
import pytest

from fino.nn import DenseNet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return DenseNet([3, 8, 8, 2], seed=0)
