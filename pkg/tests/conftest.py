import numpy as np
import pytest

from hingeplate.model import damping_profile, polynomial
from hingeplate.spectral import build_geometry


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def hinged16():
    return build_geometry("hinged", 1, 16)


@pytest.fixture
def cubic16(hinged16):
    return polynomial(hinged16, [0.0, 0.0, 1.0], tag="defocusing")


@pytest.fixture
def middle_damping(hinged16):
    return damping_profile(hinged16, (np.pi / 4, 3 * np.pi / 4), gamma0=1.0, delta=0.3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
