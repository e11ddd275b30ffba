import numpy as np
import pytest

from qflow.config import PRESETS, get_preset
from qflow.runner import run_scenario

_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def _report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def preset_runs():
    """Every preset run once, in memory (the violating preset with ``force``)."""
    return {name: run_scenario(get_preset(name), force=True, write=False) for name in PRESETS}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
