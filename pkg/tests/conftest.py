import numpy as np
import pytest

from app.models.grid import Grid
from app.models.weight import Weight
from app.services.operators import discretize, hilbert_causal, zero_kernel
from app.services.weights import family_generate


@pytest.fixture
def grid6():
    return Grid(0.0, 1.0, 6)


@pytest.fixture
def unit_weight(grid6):
    return Weight.constant(grid6)


@pytest.fixture
def hilbert6(grid6):
    return discretize(hilbert_causal(), grid6)


@pytest.fixture
def zero6(grid6):
    return discretize(zero_kernel(), grid6)


@pytest.fixture
def random_weights(grid6):
    """Random dyadic weights of moderate oscillation, one per seed."""
    return [family_generate("random_dyadic", {"beta": 4.0}, seed, grid6) for seed in range(6)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
