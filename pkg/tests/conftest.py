"""Shared fixtures: relaxations are expensive, so each (problem, order) is solved once."""

from __future__ import annotations

import functools

import pytest

from switchmoment import build_relaxation, builtin_example, solve_conic
from switchmoment.extract import time_marginal_moments

# highest order exercised per built-in
ORDERS = {"ex1": range(1, 6), "ex2": range(1, 5), "ex3": range(1, 5)}


@functools.lru_cache(maxsize=None)
def _problem(name: str, initial_state: tuple | None = None):
    if initial_state is None:
        return builtin_example(name)
    return builtin_example(name, initial_state=initial_state)


@functools.lru_cache(maxsize=None)
def _solved(name: str, d: int, initial_state: tuple | None = None):
    p = _problem(name, initial_state)
    prog = build_relaxation(p, d)
    sol = solve_conic(prog)
    marg = time_marginal_moments(sol, prog.layout) if sol.ok else None
    return prog, sol, marg


@pytest.fixture(scope="session")
def problem():
    return _problem


@pytest.fixture(scope="session")
def solved():
    """``solved(name, d, initial_state=None) -> (program, solution, marginals)``."""
    return _solved


# --- acceptance verdict lines -------------------------------------------------

_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
