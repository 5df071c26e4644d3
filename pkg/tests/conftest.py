import numpy as np
import pytest

from spear import fcnn


def make_case(n=16, m=24, b=3, depth=3, classes=5, seed=0):
    params = fcnn.init_network(fcnn.mlp_specs(n, m, depth, classes), seed)
    rng = np.random.default_rng(seed + 1000)
    X = rng.normal(size=(n, b))
    labels = rng.integers(0, classes, b)
    return params, X, labels


@pytest.fixture
def small_case():
    return make_case()


ACCEPTANCE_LINES: list = []


@pytest.fixture
def record():
    """Log one acceptance verdict line; the session summary repeats them all."""
    def _record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append((criterion, line))
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
