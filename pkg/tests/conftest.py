import numpy as np
import pytest
import torch
from hypothesis import settings

from maskguide.models import build_model
from maskguide.volumes import generate_phantoms

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def toy64():
    """Toy network in float64 for finite-difference checks."""
    return build_model("toy", seed=3, dtype=torch.float64)


@pytest.fixture(scope="session")
def small_phantoms():
    return generate_phantoms(20, 0.3, grid=(24, 24, 12), rng_seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: int(k[2:])):
            terminalreporter.write_line(RESULTS[key])
