from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from concolic_nn.solve import SolverResult

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
RUNNING = FIXTURES / "running_example"
FLIP = FIXTURES / "flip"

needs_z3 = pytest.mark.skipif(shutil.which("z3") is None, reason="z3 binary not on PATH")


class ScriptedSolver:
    """Returns canned results in order and remembers every query it saw."""

    def __init__(self, results=None, default=None):
        self.results = list(results or [])
        self.default = default or SolverResult("unsat")
        self.queries = []

    def solve(self, system, timeout=10.0):
        self.queries.append(system)
        return self.results.pop(0) if self.results else self.default


@pytest.fixture
def running_model():
    from concolic_nn.nn import load_model

    return load_model(RUNNING / "model.json")


@pytest.fixture
def running_input():
    from concolic_nn.nn import load_input

    return load_input(RUNNING / "input.json")


@pytest.fixture
def flip_model():
    from concolic_nn.nn import load_model

    return load_model(FLIP / "model.json")


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
