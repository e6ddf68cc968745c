import os

import numpy as np
import pytest
from hypothesis import settings

from chac.fespace import build_space
from chac.mesh import build_periodic_mesh

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def space2():
    return build_space(build_periodic_mesh(2, level=1))


@pytest.fixture(scope="session")
def space4():
    return build_space(build_periodic_mesh(4, level=2))


@pytest.fixture(scope="session")
def space8():
    return build_space(build_periodic_mesh(8, level=3))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
