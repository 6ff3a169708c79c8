import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_psd(rng, d, rank=None):
    rank = d if rank is None else rank
    A = rng.standard_normal((d, rank))
    return A @ A.T + (1e-3 * np.eye(d) if rank == d else 0.0)

