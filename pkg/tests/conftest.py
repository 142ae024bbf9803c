import numpy as np
import pytest

from condseg import autodiff as ad


@pytest.fixture
def f64():
    with ad.float64_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=False):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
