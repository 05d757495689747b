import numpy as np
import pytest

from slidekit.grid import Grid, GridFunction


def sample(grid: Grid, fn) -> GridFunction:
    """Grid function from a callable on coordinates ``(..., n)``."""
    return GridFunction(grid, fn(grid.coords))


@pytest.fixture
def grid2():
    return Grid(2, 65)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
