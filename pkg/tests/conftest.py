import numpy as np
import pytest

from netdr.graph import NodeData, load_graph


def random_graph(rng, n, p):
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return load_graph(np.column_stack([iu[keep], ju[keep]]), n)


def random_data(rng, n, k=2, Z=None):
    X = rng.standard_normal((n, k))
    if Z is None:
        Z = rng.integers(0, 2, n)
    return NodeData(X, Z, rng.standard_normal(n), tuple(f"x{j + 1}" for j in range(k)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
