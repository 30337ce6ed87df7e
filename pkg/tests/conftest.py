from __future__ import annotations

import os
import sys
from dataclasses import replace

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lobmm.model import reference_model  # noqa: E402
from lobmm.solver import SolverGrid, SolverParams, solve_mean_criterion  # noqa: E402

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def ref_model():
    return reference_model()


@pytest.fixture(scope="session")
def default_grid():
    return SolverGrid()


@pytest.fixture(scope="session")
def default_params():
    return SolverParams()


@pytest.fixture(scope="session")
def solved_star(ref_model, default_grid, default_params):
    return solve_mean_criterion(ref_model, default_grid, default_params)


@pytest.fixture(scope="session")
def solved_womo(ref_model, default_grid, default_params):
    return solve_mean_criterion(ref_model, default_grid, replace(default_params, ebar=0.0))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
