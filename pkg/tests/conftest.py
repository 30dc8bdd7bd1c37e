import numpy as np
import pytest

from qcbadc.system import DesignSpec


@pytest.fixture
def nominal_design():
    return DesignSpec(N=6, OSR=8, f_n=0.125)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
