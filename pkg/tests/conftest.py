import warnings

import numpy as np
import pytest
from hypothesis import settings

from labeldelivery.data import make_synthetic_task
from labeldelivery.errors import DegenerateWarning
from labeldelivery.nnet import init_model

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def small_task():
    return make_synthetic_task(200, 4, 6, 1.0, 20, 3)


@pytest.fixture
def tiny_model():
    """d=3 -> 4 -> C=3, 31 parameters: small enough for explicit Hessians."""
    return init_model((3, 4, 3), seed=5)


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        yield


# verdict lines recorded by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
