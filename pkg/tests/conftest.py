import numpy as np
import pytest
from hypothesis import settings

from qel.toric import build_quadrature, hirzebruch, product_of_lines, projective_line

settings.register_profile("qel", max_examples=25, deadline=None)
settings.load_profile("qel")

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def p1():
    return projective_line()


@pytest.fixture(scope="session")
def f1():
    return hirzebruch()


@pytest.fixture(scope="session")
def p1xp1():
    return product_of_lines()


@pytest.fixture(scope="session")
def f1_quad(f1):
    return build_quadrature(f1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
