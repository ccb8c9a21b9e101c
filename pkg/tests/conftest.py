import numpy as np
import pytest

from scarforge.atlas import load_atlas
from scarforge.phantom import lv_phantom


@pytest.fixture(scope="session")
def lv64():
    return lv_phantom((64, 64, 64))


@pytest.fixture(scope="session")
def atlas64(lv64):
    return load_atlas(lv64.labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
