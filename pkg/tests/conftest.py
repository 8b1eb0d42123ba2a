import numpy as np
import pytest

from cecrf.trellis import ScoreTable


def random_table(rng, n, m, scale=2.0):
    return ScoreTable(rng.normal(scale=scale, size=(n, m)), rng.normal(scale=scale, size=(m, m)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
