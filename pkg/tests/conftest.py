import numpy as np
import pytest

from kd3a.nn import init_classifier


@pytest.fixture
def small_model():
    rng = np.random.default_rng(7)
    return init_classifier(5, 3, hidden=(6, 4), rng=rng, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
