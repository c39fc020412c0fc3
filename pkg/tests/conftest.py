import numpy as np
import pytest

from pgsearch.tasks import generate_offline_dataset, get_task


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bowl_ds():
    return generate_offline_dataset(get_task("quadratic-bowl"), 1000, 40, seed=3)
