import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    from fgmn.experiments import DatasetSpec, generate_dataset

    return generate_dataset(DatasetSpec(count=24, min_heavy=4, max_heavy=7, seed=5))
