import numpy as np
import pytest


@pytest.fixture
def rng(request):
    # one stream per test, stable across runs and test ordering
    seed = sum(map(ord, request.node.name))
    return np.random.default_rng(seed)
