"""Lower bounds and switching schedules for polynomial switched systems.

A switched optimal control problem is lifted to a linear program over
occupation measures, truncated to a hierarchy of semidefinite programs on
moments, solved with a built-in interior-point method, and its optimal time
moments are turned back into piecewise-constant mode densities and
pulse-width switching signals.

Typical use::

    from switchmoment import builtin_example, build_relaxation, solve_conic
    p = builtin_example("ex1")
    sol = solve_conic(build_relaxation(p, 3))
    sol.objective        # lower bound on the optimal cost
"""

__version__ = "0.1.0"

from .poly import Polynomial, lie_derivative, monomial_basis  # noqa: E402
from .problem import (FixedHorizon, FreeHorizon, Mode, SemialgebraicSet,  # noqa: E402
                      SwitchedProblem, builtin_example, load_problem, parse_problem,
                      serialize_problem)
from .relax import ConicProgram, build_relaxation, count_variables  # noqa: E402
from .sdp import ConicSolution, SolverSettings, Status, kkt_residuals, solve_conic  # noqa: E402
from .extract import (MarginalMoments, Schedule, extract_schedule,  # noqa: E402
                      time_marginal_moments)
from .sim import certify_gap, pwm_realize, simulate_relaxed, simulate_switched  # noqa: E402

__all__ = [
    "Polynomial", "lie_derivative", "monomial_basis",
    "FixedHorizon", "FreeHorizon", "Mode", "SemialgebraicSet", "SwitchedProblem",
    "builtin_example", "load_problem", "parse_problem", "serialize_problem",
    "ConicProgram", "build_relaxation", "count_variables",
    "ConicSolution", "SolverSettings", "Status", "kkt_residuals", "solve_conic",
    "MarginalMoments", "Schedule", "extract_schedule", "time_marginal_moments",
    "certify_gap", "pwm_realize", "simulate_relaxed", "simulate_switched",
]
