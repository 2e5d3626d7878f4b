import numpy as np
import pytest

from vamos_octa.volume import PhantomConfig, generate_phantom_with_vessels


@pytest.fixture(scope="session")
def phantom7():
    return generate_phantom_with_vessels(PhantomConfig(), 7)


@pytest.fixture(scope="session")
def small_cfg():
    return PhantomConfig(n_slices=16, height=16, width=24, n_vessels=4, radius_range=(1.0, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
