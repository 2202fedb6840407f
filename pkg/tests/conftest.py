import numpy as np
import pytest

from snt.hierarchy import load_hierarchy


@pytest.fixture(scope="session")
def toy7():
    return load_hierarchy("toy7")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
