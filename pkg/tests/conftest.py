import sys
from pathlib import Path

import pytest

from randquant.source import make_truncated_gaussian, make_uniform

sys.path.insert(0, str(Path(__file__).parent))

# (criterion number, passed, detail) rows collected by the acceptance tests
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def gauss():
    return make_truncated_gaussian()


@pytest.fixture(scope="session")
def coarse_gauss():
    """Cheaper grid for tests that run many designs."""
    return make_truncated_gaussian(n_points=401)


@pytest.fixture(scope="session")
def unif():
    return make_uniform()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
