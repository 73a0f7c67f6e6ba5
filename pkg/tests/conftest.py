import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from emtwin.fixtures import load_fixture

settings.register_profile("emtwin", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("emtwin")


@pytest.fixture(scope="session")
def desk():
    return load_fixture("desk")


@pytest.fixture(scope="session")
def shoebox():
    return load_fixture("shoebox")


@pytest.fixture(scope="session")
def floor():
    return load_fixture("floor")


def random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
