import numpy as np
import pytest

from latentforge.backend.task import toy_task_sample
from latentforge.backend.toy import ToyBackend


@pytest.fixture(scope="session")
def raw_backend():
    """Seed-0 backend with untrained (but seeded) weights."""
    return ToyBackend(seed=0)


@pytest.fixture(scope="session")
def trained_backend():
    """Seed-0 backend trained on the synthetic task; cached for the session."""
    return ToyBackend.pretrained(seed=0)


@pytest.fixture(scope="session")
def toy_instance():
    return toy_task_sample(0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
