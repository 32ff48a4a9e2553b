import io

import numpy as np
import pytest
import scipy.sparse as sp

from switchmoment.problem import builtin_example
from switchmoment.relax import (ConicProgram, PsdBlock, build_relaxation, read_program,
                                write_program)
from switchmoment.sdp import SolverSettings, Status, kkt_residuals, solve_conic

from conftest import ORDERS

KKT_TOL = 1e-7
# ex2 at d = 4 stalls at NearOptimal with a dual residual near 1e-5; an
# independent solver reports the same instance as inaccurate
KNOWN_NEAR_OPTIMAL = {("ex2", 4)}


def single_block(const, coeff, c=(1.0,)):
    const = np.asarray(const, float)
    coeffs = np.asarray(coeff, float)[None]
    blk = PsdBlock("X", const.shape[0], np.array([0]), coeffs, const)
    return ConicProgram(1, np.asarray(c, float), sp.csr_matrix((0, 1)), np.zeros(0), [blk])


def test_two_by_two():
    prog = single_block([[0, 1], [1, 0]], np.eye(2))
    sol = solve_conic(prog)
    assert sol.status is Status.OPTIMAL
    assert sol.moments[0] == pytest.approx(1.0, abs=1e-7)
    assert sol.objective == pytest.approx(1.0, abs=1e-7)


def test_primal_infeasible():
    prog = single_block(np.diag([0.0, -1.0]), np.diag([1.0, -1.0]), c=(0.0,))
    assert solve_conic(prog).status is Status.PRIMAL_INFEASIBLE


def test_dual_infeasible():
    # min -x s.t. x >= 0 is unbounded below
    prog = single_block([[0.0]], [[1.0]], c=(-1.0,))
    assert solve_conic(prog).status is Status.DUAL_INFEASIBLE


def test_iteration_limit_is_reported_not_raised():
    prog = build_relaxation(builtin_example("ex1"), 3)
    sol = solve_conic(prog, SolverSettings(max_iterations=2))
    assert sol.status is Status.ITERATION_LIMIT
    assert sol.iterations <= 2


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(step_fraction=1.0)
    with pytest.raises(ValueError):
        SolverSettings(feasibility_tolerance=0.0)


def test_ex1_order_two_value(solved):
    assert solved("ex1", 2)[1].objective == pytest.approx(4.1001e-2, abs=1e-4)


def test_ex1_order_one_near_zero(solved):
    assert abs(solved("ex1", 1)[1].objective) < 1e-7


# --- residual recomputation ----------------------------------------------------

def test_kkt_hand_built_point():
    prog = single_block([[0, 1], [1, 0]], np.eye(2))
    exact = solve_conic(prog)
    exact.moments = np.array([1.0])
    exact.dual_eq = np.zeros(0)
    exact.dual_psd = [np.array([[0.5, -0.5], [-0.5, 0.5]])]
    r = kkt_residuals(prog, exact)
    assert r["primal_equality"] <= 1e-12
    assert r["dual_equality"] <= 1e-12
    assert abs(r["gap"]) <= 1e-12
    assert r["min_eig"] >= -1e-12 and min(r["dual_min_eig"]) >= -1e-12


def test_kkt_perturbation_is_linear(solved):
    prog, sol, _ = solved("ex1", 2)
    base = kkt_residuals(prog, sol)["primal_equality"]
    A = prog.A.toarray()
    j = int(np.argmax(np.abs(A).sum(axis=0)))
    sol2 = type(sol)(**{**sol.__dict__, "moments": sol.moments.copy()})
    sol2.moments[j] += 1e-3
    r = kkt_residuals(prog, sol2)["primal_equality"]
    assert r == pytest.approx(1e-3 * np.abs(A[:, j]).max(), abs=base + 1e-12)


def test_kkt_ex1_order_three_gap(solved):
    prog, sol, _ = solved("ex1", 3)
    assert abs(kkt_residuals(prog, sol)["gap"]) <= 1e-7


def test_kkt_dimension_check(solved):
    prog, sol, _ = solved("ex1", 2)
    other = build_relaxation(builtin_example("ex1"), 3)
    with pytest.raises(ValueError):
        kkt_residuals(other, sol)


ALL_INSTANCES = [(name, d) for name, ds in ORDERS.items() for d in ds]


@pytest.mark.parametrize("name,d", ALL_INSTANCES)
def test_kkt_residuals_small(name, d, solved):
    prog, sol, _ = solved(name, d)
    if (name, d) in KNOWN_NEAR_OPTIMAL:
        assert sol.status is Status.NEAR_OPTIMAL
        pytest.xfail("dual residual stalls near 1e-5 on this instance")
    assert sol.status is Status.OPTIMAL
    r = kkt_residuals(prog, sol)
    assert r["primal_equality"] <= KKT_TOL
    assert r["dual_equality"] <= KKT_TOL
    assert r["min_eig"] >= -KKT_TOL
    assert min(r["dual_min_eig"]) >= -KKT_TOL
    assert abs(r["gap"]) <= KKT_TOL


@pytest.mark.parametrize("name,d", ALL_INSTANCES)
def test_psd_blocks_within_tolerance(name, d, solved):
    prog, sol, _ = solved(name, d)
    assert kkt_residuals(prog, sol)["min_eig"] >= -10 * SolverSettings().feasibility_tolerance


@pytest.mark.parametrize("name,d", ALL_INSTANCES)
def test_weak_duality(name, d, solved):
    """dual objective <= primal objective once the first-order residual terms are included.

    For any x and (y, Z):  c'x - (b'y - sum <C_j, Z_j>)
        = sum <S_j, Z_j> + y'(A x - b) + x' r_d,   with S_j, Z_j PSD.
    """
    prog, sol, _ = solved(name, d)
    r = kkt_residuals(prog, sol)
    x, y = sol.moments, sol.dual_eq
    A = prog.A.toarray()
    adj = np.zeros(prog.num_vars)
    for blk, Z in zip(prog.blocks, sol.dual_psd):
        np.add.at(adj, blk.var_idx, np.tensordot(blk.coeffs, Z, axes=([1, 2], [0, 1])))
    rd = prog.c - A.T @ y - adj
    correction = y @ (A @ x - prog.b) + x @ rd
    lhs = r["primal_objective"] - r["dual_objective"]
    scale = 1.0 + abs(r["primal_objective"])
    assert lhs == pytest.approx(r["gap"] + correction, abs=1e-9 * scale)
    # <S, Z> of two PSD matrices is nonnegative up to their eigenvalue slack
    slack = sum(max(0.0, -np.linalg.eigvalsh(blk.evaluate(x))[0]) * np.trace(Z)
                + max(0.0, -np.linalg.eigvalsh(Z)[0]) * np.trace(blk.evaluate(x))
                for blk, Z in zip(prog.blocks, sol.dual_psd))
    assert r["dual_objective"] <= r["primal_objective"] - correction + slack + 1e-9 * scale


def test_determinism():
    prog = build_relaxation(builtin_example("ex3"), 2)
    a, b = solve_conic(prog), solve_conic(prog)
    assert a.iterations == b.iterations
    assert a.objective == b.objective
    np.testing.assert_array_equal(a.moments, b.moments)


# --- independent solver --------------------------------------------------------
#
# These relaxations are ill-conditioned enough that a 1e-8 stopping rule leaves
# the objective uncertain around 1e-6 relative (ex3 at d = 3 lands 3.5e-6 low at
# default settings), so both solvers run with tightened tolerances here.

TIGHT = SolverSettings(feasibility_tolerance=1e-10, duality_gap_tolerance=1e-10)


def _reference_value(prog: ConicProgram) -> float:
    cp = pytest.importorskip("cvxpy")
    y = cp.Variable(prog.num_vars)
    cons = [prog.A @ y == prog.b] if prog.A.shape[0] else []
    for blk in prog.blocks:
        M = blk.const + sum(y[int(i)] * blk.coeffs[k] for k, i in enumerate(blk.var_idx))
        cons.append((M + M.T) / 2 >> 0)
    pr = cp.Problem(cp.Minimize(prog.c @ y), cons)
    pr.solve(solver="CVXOPT", kktsolver="robust", abstol=1e-8, reltol=1e-8,
             feastol=1e-8, refinement=3, max_iters=300)
    assert pr.status == "optimal"
    return float(pr.value)


@pytest.mark.parametrize("name", ["ex1", "ex2", "ex3"])
@pytest.mark.parametrize("d", [1, 2, 3])
def test_against_independent_solver(name, d):
    prog = build_relaxation(builtin_example(name), d)
    buf = io.StringIO()
    write_program(prog, buf)
    ref = _reference_value(read_program(io.StringIO(buf.getvalue())))
    sol = solve_conic(prog, TIGHT)
    assert sol.ok
    assert sol.objective == pytest.approx(ref, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("name,d", [("ex1", 3), ("ex3", 3)])
def test_default_tolerance_errs_low(name, d, solved):
    # the default-settings value sits below the tightly solved one, which keeps
    # it a valid lower bound
    prog, sol, _ = solved(name, d)
    tight = solve_conic(prog, TIGHT)
    assert sol.objective <= tight.objective + 1e-9
    assert sol.objective == pytest.approx(tight.objective, rel=1e-5)
