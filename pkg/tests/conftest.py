import numpy as np
import pytest

K_PLUS = np.array([[2.0, -2.0], [0.0, 2.0]])
K_MINUS = np.array([[-2.0, 0.0], [2.0, -2.0]])
K_ZERO = np.array([[0.0, -1.0], [1.0, 0.0]])
K_V = np.array([[2.0, 1.0], [-1.0, 2.0], [0.0, 1.0]])
EXAMPLE_INPUTS = np.array([[0.1, 0.1], [-0.1, -0.1], [0.0, 0.5]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
