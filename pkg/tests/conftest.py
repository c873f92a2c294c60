import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ybspin.spinham import AxialTensor, FieldVector, ManifoldParams

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GROUND = ManifoldParams(g=AxialTensor(-6.08, 0.85), a=AxialTensor(-4.82, 0.675), label="ground")
EXCITED = ManifoldParams(g=AxialTensor(2.51, 1.7), a=AxialTensor(4.86, 3.37), label="excited")

FIT_FIELDS = [
    FieldVector(),
    FieldVector(0, 0, 0.5),
    FieldVector(0, 0, 1.0),
    FieldVector(0.5, 0, 0),
    FieldVector(1.0, 0, 0),
]


@pytest.fixture
def ground():
    return GROUND


@pytest.fixture
def excited():
    return EXCITED


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
