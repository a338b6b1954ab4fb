import time

import numpy as np
import pytest

from screenlab.model import uniform_square_primitives
from screenlab.solver import SolverConfig, solve_equilibrium

SUITE_BUDGET = 20 * 60.0
_RESULTS = {}
_START = time.perf_counter()


@pytest.fixture(scope="session")
def small_menu():
    """Uniform-square equilibrium on a 21 x 21 lattice (about one second)."""
    prim = uniform_square_primitives(1.0, 21)
    return prim, solve_equilibrium(prim, SolverConfig(mesh=21))


@pytest.fixture(scope="session")
def menu101():
    """Uniform-square equilibrium at the acceptance resolution, solved once per session."""
    prim = uniform_square_primitives(1.0, 101)
    t0 = time.perf_counter()
    menu = solve_equilibrium(prim, SolverConfig(mesh=101))
    menu.info["wall_time"] = time.perf_counter() - t0
    return prim, menu


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance():
    """Record one line per acceptance criterion: ``acceptance(k, ok, detail)``."""
    def record(k, ok, detail):
        _RESULTS[k] = (bool(ok), detail)
        return ok
    return record


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _START
    if 11 in _RESULTS:
        ok, detail = _RESULTS[11]
        within = elapsed <= SUITE_BUDGET
        _RESULTS[11] = (ok and within, f"{detail}; suite wall time {elapsed:.0f} s (budget {SUITE_BUDGET:.0f} s)")
        if not within and session.exitstatus == 0:
            session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        ok, detail = _RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
