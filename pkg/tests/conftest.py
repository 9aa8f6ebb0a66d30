import numpy as np
import pytest

from harmony import tensor as T


@pytest.fixture(autouse=True)
def fresh_graph():
    T.reset_graph()
    yield
    T.reset_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
