import numpy as np
import pytest

from tatdet import tensor as T


@pytest.fixture(autouse=True)
def _float64_default():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register one line each; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
