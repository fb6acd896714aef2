import os

# NaN/Inf guards on for the whole suite; must be set before vitgan is imported
os.environ.setdefault("VITGAN_DEBUG", "1")

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
