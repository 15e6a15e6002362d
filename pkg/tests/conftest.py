import numpy as np
import pytest

from icunet import clinical_data as cd

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_schema():
    return cd.synthetic_schema(n_continuous=6, n_binary=2)


@pytest.fixture
def toy_separable():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 4))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    # margin so both the net and the linear oracle can separate it
    keep = np.abs(X[:, 0] + 0.5 * X[:, 1]) > 0.2
    X, y = X[keep], y[keep]
    return X[:200], y[:200]
