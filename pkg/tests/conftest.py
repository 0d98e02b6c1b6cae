import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from catflow.schedule import make_schedule

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def linear():
    return make_schedule("linear")


@pytest.fixture(scope="session")
def mixture():
    return make_schedule("mixture", 0.75, vocab_size=4)


def random_simplex(rng, shape, floor=0.0):
    p = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
    if floor:
        p = (p + floor) / (1 + floor * shape[-1])
    return p


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
