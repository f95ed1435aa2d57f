import numpy as np
import pytest

from crossrank.embedstore import from_arrays


def unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_pair(rng):
    gallery = from_arrays(unit_rows(rng.normal(size=(12, 4))), [0, 1, 2] * 4, prefix="g", domain="B")
    queries = from_arrays(unit_rows(rng.normal(size=(3, 4))), [0, 1, 2], prefix="q", domain="A")
    return gallery, queries
