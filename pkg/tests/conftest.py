import numpy as np
import pytest

from capm.generate import random_suite


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_nets():
    return random_suite(seed=7, count=24)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, status

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in RESULTS:
        terminalreporter.write_line(f"{status(ok)}  {criterion}: {detail}")
