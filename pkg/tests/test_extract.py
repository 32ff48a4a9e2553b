import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from switchmoment.extract import (AtomicMeasure, ExtractionError, MarginalMoments, Schedule,
                                  derivative_moments, extract_schedule, fft_density,
                                  fit_densities, joint_decompose, moments_of_schedule,
                                  project_simplex, prony_decompose, rebuild_schedule,
                                  time_marginal_moments)
from switchmoment.sdp import Status


def ex1_analytic(count):
    a = np.arange(count)
    return (2.0 + 2.0 ** -a) / (4.0 + 4.0 * a)


def atom_moments(t, w, count):
    t, w = np.asarray(t, float), np.asarray(w, float)
    return np.array([np.sum(w * t ** a) for a in range(count)])


# --- moments ---------------------------------------------------------------

def test_analytic_formula_matches_quadrature():
    y = moments_of_schedule([0, 0.5, 1], [[1.0], [0.5]], 8)[0]
    np.testing.assert_allclose(y, ex1_analytic(8), rtol=1e-14)


def test_derivative_moments_ex1():
    yp = derivative_moments(ex1_analytic(6))
    assert yp[0] == 0.0
    assert yp[1] == pytest.approx(-0.75, abs=1e-15)
    assert yp[2] == pytest.approx(-0.625, abs=1e-15)


def test_derivative_moments_zero():
    assert not np.any(derivative_moments(np.zeros(5)))


def test_derivative_moments_constant_density():
    y = 1.0 / (np.arange(7) + 1.0)
    yp = derivative_moments(y)
    np.testing.assert_allclose(yp[1:], -1.0)
    # atoms +1 at 0 and -1 at 1
    np.testing.assert_allclose(yp, atom_moments([0, 1], [1, -1], len(yp)), atol=1e-15)


def test_derivative_identity_for_schedules():
    # moments of u' equal the jump measure moments, with u extended by zero
    bp, U = [0, 0.3, 0.8], [[0.2], [0.9]]
    yp = derivative_moments(moments_of_schedule(bp, U, 9)[0])
    np.testing.assert_allclose(yp, atom_moments([0, 0.3, 0.8], [0.2, 0.7, -0.9], 10),
                               atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(-3, 3))
def test_derivative_moments_linear(a, b, c):
    a, b = np.array(a), np.array(b)
    np.testing.assert_allclose(derivative_moments(a + c * b),
                               derivative_moments(a) + c * derivative_moments(b),
                               atol=1e-12)


def test_derivative_moments_needs_two():
    with pytest.raises(ValueError):
        derivative_moments([1.0])


# --- Prony ------------------------------------------------------------------

def test_prony_ex1_jumps():
    yp = atom_moments([0, 0.5, 1], [1, -0.5, -0.5], 12)
    am = prony_decompose(yp)
    np.testing.assert_allclose(am.atoms, [0, 0.5, 1], atol=1e-8)
    np.testing.assert_allclose(am.weights, [1, -0.5, -0.5], atol=1e-8)
    assert not am.ill_conditioned


def test_prony_zero():
    am = prony_decompose(np.zeros(6))
    assert len(am) == 0


def test_prony_two_atoms():
    yp = atom_moments([0.2, 0.8], [1, -1], 8)
    am = prony_decompose(yp)
    assert len(am) == 2
    np.testing.assert_allclose(am.atoms, [0.2, 0.8], atol=1e-10)
    np.testing.assert_allclose(am.weights, [1, -1], atol=1e-10)
    assert am.residual < 1e-12


def test_prony_merges_close_atoms():
    yp = atom_moments([0.3, 0.3004, 0.7], [0.5, 0.5, -1.0], 12)
    am = prony_decompose(yp, rank_tolerance=1e-12)
    assert len(am) == 2
    assert am.weights[0] == pytest.approx(1.0, abs=1e-3)


def test_prony_needs_three():
    with pytest.raises(ValueError):
        prony_decompose([0.0, 1.0])


def test_atomic_moments_and_csv(tmp_path):
    am = AtomicMeasure(np.array([0.0, 0.5]), np.array([1.0, -1.0]))
    np.testing.assert_allclose(am.moments(3), [0.0, -0.5, -0.25])
    am.to_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "atom,weight"


# --- schedules -------------------------------------------------------------

def test_project_simplex():
    np.testing.assert_allclose(project_simplex([0.5, 0.5]), [0.5, 0.5])
    np.testing.assert_allclose(project_simplex([2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex([0.7, 0.7]), [0.5, 0.5])
    u = project_simplex([-0.2, 0.4, 1.3])
    assert u.min() >= 0 and u.sum() == pytest.approx(1.0)


def test_rebuild_ex1_analytic():
    y1 = ex1_analytic(11)
    y2 = 1.0 / (np.arange(11) + 1.0) - y1
    marg = MarginalMoments(np.vstack([y1, y2]))
    at = [prony_decompose(derivative_moments(yk)) for yk in marg.y]
    s = rebuild_schedule(at, marg)
    np.testing.assert_allclose(s.breakpoints, [0, 0.5, 1], atol=1e-8)
    np.testing.assert_allclose(s.densities, [[1, 0], [0.5, 0.5]], atol=1e-8)


def test_rebuild_single_mode():
    marg = MarginalMoments(np.array([[0.7, 0.1, 0.3, 0.9, 0.2]]), time_scale=5.0)
    s = rebuild_schedule([AtomicMeasure(np.zeros(0), np.zeros(0))], marg)
    np.testing.assert_allclose(s.densities, [[1.0]])
    assert s.horizon == pytest.approx(3.5)
    U, _ = fit_densities([0.0, 0.7], marg)
    np.testing.assert_allclose(U, [[1.0]])


def test_rebuild_rejects_non_telescoping():
    y = moments_of_schedule([0, 0.5, 1], [[1, 0], [0.5, 0.5]], 9)
    marg = MarginalMoments(y)
    bad = [AtomicMeasure(np.array([0.0, 0.5]), np.array([1.0, -0.2])),
           AtomicMeasure(np.array([0.5, 1.0]), np.array([0.5, -0.5]))]
    with pytest.raises(ExtractionError):
        rebuild_schedule(bad, marg)


def test_schedule_validation_and_queries(tmp_path):
    with pytest.raises(ValueError):
        Schedule([0, 1], [[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        Schedule([1, 0], [[1, 0]])
    s = Schedule([0, 2, 3], [[1, 0], [0.25, 0.75]])
    np.testing.assert_allclose(s.masses(), [2.25, 0.75])
    np.testing.assert_allclose(s.at(2.5), [0.25, 0.75])
    np.testing.assert_allclose(s.at(0.0), [1, 0])
    s.check_simplex()
    with pytest.raises(ValueError):
        Schedule([0, 1], [[0.6, 0.6]]).check_simplex()
    s.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t_start,t_end,u_1,u_2" and len(lines) == 3


# --- round trip on synthetic schedules ---------------------------------------

def random_schedule(rng):
    """<= 4 breakpoints, simplex densities on a 1/20 grid (jumps 0 or >= 0.05)."""
    m = int(rng.integers(2, 4))
    nint = int(rng.integers(0, 3))
    s_end = rng.uniform(0.5, 1.0)
    while True:
        inner = np.sort(rng.uniform(0.05, s_end - 0.05, nint))
        bp = np.concatenate([[0.0], inner, [s_end]])
        if np.all(np.diff(bp) > 0.05):
            break
    U = []
    for _ in range(nint + 1):
        while True:
            u = rng.multinomial(20, np.ones(m) / m) / 20.0
            if not U or np.any(u != U[-1]):
                break
        U.append(u)
    return bp, np.array(U), rng.uniform(1.0, 6.0)


SYNTHETIC = [random_schedule(np.random.default_rng(1000 + i)) for i in range(100)]


@pytest.mark.parametrize("bp,U,th", SYNTHETIC)
def test_roundtrip_per_mode(bp, U, th):
    # exact moments carry no noise, so the rank cut can sit far below the default
    marg = MarginalMoments(moments_of_schedule(bp, U, 17), th)
    at = [prony_decompose(derivative_moments(yk), rank_tolerance=1e-8) for yk in marg.y]
    s = rebuild_schedule(at, marg)
    assert len(s.breakpoints) == len(bp)
    np.testing.assert_allclose(s.breakpoints, bp * th, atol=1e-6)
    np.testing.assert_allclose(s.densities, U, atol=1e-6)


@pytest.mark.parametrize("bp,U,th", SYNTHETIC)
def test_roundtrip_joint(bp, U, th):
    marg = MarginalMoments(moments_of_schedule(bp, U, 17), th)
    s, _ = extract_schedule(marg)
    assert len(s.breakpoints) == len(bp)
    np.testing.assert_allclose(s.breakpoints, bp * th, atol=1e-6)
    np.testing.assert_allclose(s.densities, U, atol=1e-6)
    np.testing.assert_allclose(s.masses(), marg.masses, rtol=1e-6)


def test_joint_handles_close_switches():
    # two switching instants 0.015 apart, as in the third built-in example
    bp = np.array([0.0, 0.0146, 0.03, 0.66])
    U = np.array([[1.0, 0.0], [0.85, 0.15], [0.5, 0.5]])
    marg = MarginalMoments(moments_of_schedule(bp, U, 9), 6.0)
    s, at = extract_schedule(marg)
    assert all(not a.ill_conditioned for a in at)
    np.testing.assert_allclose(s.masses(), marg.masses, rtol=1e-6)


# --- Fourier diagnostic ---------------------------------------------------------

def test_fft_constant_density():
    g = fft_density(1.0 / (np.arange(40) + 1.0), 64)
    s = np.arange(64) / 64
    inner = g[(s > 0.05) & (s < 0.95)]
    assert np.all(np.abs(inner - 1.0) < 0.05)


def test_fft_zero():
    assert not np.any(fft_density(np.zeros(6), 8))


def test_fft_ex1_profile():
    g = fft_density(ex1_analytic(100), 256)
    s = np.arange(256) / 256
    assert g[(s > 0.1) & (s < 0.4)].mean() == pytest.approx(1.0, abs=0.05)
    assert g[(s > 0.6) & (s < 0.9)].mean() == pytest.approx(0.5, abs=0.05)
    # mass preserved
    assert g.mean() == pytest.approx(0.75, rel=0.05)


def test_fft_short_sequence_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fft_density(1.0 / (np.arange(3) + 1.0), 4)
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_fft_grid_checks():
    with pytest.raises(ValueError):
        fft_density(np.ones(8), 6)
    with pytest.raises(ValueError):
        fft_density(np.ones(8), 4)


# --- solved built-ins -------------------------------------------------------

@pytest.mark.parametrize("name,d", [("ex1", 2), ("ex1", 3), ("ex1", 4), ("ex1", 5),
                                    ("ex2", 2), ("ex2", 3), ("ex2", 4),
                                    ("ex3", 2), ("ex3", 3), ("ex3", 4)])
def test_marginals_are_moment_sequences(name, d, solved):
    prog, sol, marg = solved(name, d)
    assert np.all(marg.hankel_min_eig() >= -1e-7)
    y = marg.y
    assert np.all(y >= -1e-7)
    assert np.all(y[:, 1:] <= y[:, :-1] + 1e-7)


@pytest.mark.parametrize("name", ["ex1", "ex2", "ex3"])
def test_masses_sum_to_terminal_time(name, solved, problem):
    p = problem(name)
    prog, sol, marg = solved(name, 3)
    assert marg.masses.sum() == pytest.approx(marg.terminal_time)
    if not p.is_free:
        assert marg.masses.sum() == pytest.approx(p.horizon_length, abs=1e-7)
    assert marg.terminal_time <= p.horizon_length + 1e-7


@pytest.mark.parametrize("name,d", [("ex1", 5), ("ex2", 4), ("ex3", 4)])
def test_mass_consistency(name, d, solved):
    prog, sol, marg = solved(name, d)
    s, _ = extract_schedule(marg)
    s.check_simplex()
    assert s.masses().sum() == pytest.approx(marg.masses.sum(), rel=1e-2)


def test_ex1_per_mode_route_from_solution(solved):
    prog, sol, marg = solved("ex1", 5)
    s, _ = extract_schedule(marg, joint=False, refit=False)
    np.testing.assert_allclose(s.breakpoints, [0, 0.5, 1], atol=1e-2)
    np.testing.assert_allclose(s.densities, [[1, 0], [0.5, 0.5]], atol=1e-2)


def test_time_marginals_reject_failed_solution(solved):
    prog, sol, _ = solved("ex1", 2)
    bad = type(sol)(**{**sol.__dict__, "status": Status.ITERATION_LIMIT})
    with pytest.raises(ExtractionError):
        time_marginal_moments(bad, prog.layout)


def test_joint_decompose_atoms_shared(solved):
    prog, sol, marg = solved("ex2", 4)
    at = joint_decompose(marg)
    # both modes jump at the two interior switches
    for am in at:
        inner = am.atoms[(am.atoms > 0.01) & (am.atoms < marg.y[:, 0].sum() - 0.01)]
        assert len(inner) >= 1
