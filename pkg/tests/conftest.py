import numpy as np
import pytest

from gtsnt.graph import make_graph

_ACCEPTANCE = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``verdict(ok, "detail")``; the test still has to assert.
    """

    def record(ok: bool, detail: str = ""):
        name = request.node.name
        line = f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def two_node():
    return make_graph(2, [(0, 1)], [[1.0, 2.0], [3.0, 4.0]], [0, 1], {"train": [0], "val": [1], "test": []}, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
