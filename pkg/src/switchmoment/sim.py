"""Trajectories under relaxed schedules and pure switching signals.

Integration is classical fixed-step RK4.  Steps never straddle a breakpoint:
each segment ``[a, b]`` is split into ``ceil((b - a) / step)`` equal steps, so
the vector field is smooth inside every step.  The running cost is carried as
an extra state component.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import ceil, floor

import numpy as np

from ._io import atomic_write_text, csv_text
from .extract import Schedule
from .poly import Polynomial, monomial_basis
from .problem import SwitchedProblem

log = logging.getLogger(__name__)

DEFAULT_STEPS = 4096
NEAR_OPTIMAL_GAP = 0.01
BOUND_SLACK = 1e-6


class SimulationError(ArithmeticError):
    """The integration cannot proceed (bad step or blow-up)."""


# --- signals ---------------------------------------------------------------


@dataclass(frozen=True)
class SwitchSignal:
    """Pure switching signal: consecutive ``(t_start, t_end, mode)`` intervals, modes 1-based."""

    intervals: tuple[tuple[float, float, int], ...]

    def __post_init__(self):
        iv = tuple((float(a), float(b), int(k)) for a, b, k in self.intervals)
        prev = 0.0
        for a, b, k in iv:
            if b < a or abs(a - prev) > 1e-9 * max(1.0, abs(prev)):
                raise ValueError("intervals must be consecutive and start at 0")
            if k < 1:
                raise ValueError("mode indices are 1-based")
            prev = b
        object.__setattr__(self, "intervals", iv)

    @property
    def horizon(self) -> float:
        return self.intervals[-1][1] if self.intervals else 0.0

    def occupancy(self, m: int) -> np.ndarray:
        """Total time spent in each mode."""
        occ = np.zeros(m)
        for a, b, k in self.intervals:
            occ[k - 1] += b - a
        return occ

    def as_segments(self, m: int) -> list[tuple[float, float, np.ndarray]]:
        out = []
        for a, b, k in self.intervals:
            if k > m:
                raise ValueError(f"mode {k} out of range for {m} modes")
            u = np.zeros(m)
            u[k - 1] = 1.0
            out.append((a, b, u))
        return out


def pwm_realize(sched: Schedule, period: float) -> SwitchSignal:
    """Pulse-width realization of ``sched``.

    Each segment is cut into whole periods; inside a period the modes are
    visited in index order for ``u_k * period`` each.  The leftover time at the
    end of a segment goes to the mode with the largest density.  A segment
    shorter than one period is realized as a single proportional cycle.
    """
    if period <= 0:
        raise ValueError("period must be positive")
    out: list[tuple[float, float, int]] = []

    def push(a: float, b: float, k: int) -> None:
        if b <= a:
            return
        if out and out[-1][2] == k:
            out[-1] = (out[-1][0], b, k)
        else:
            out.append((a, b, k))

    for a, b, u in sched.segments:
        length = b - a
        if length <= 0:
            continue
        ncyc = floor(length / period + 1e-9)
        if ncyc == 0:
            ncyc, per = 1, length
        else:
            per = period
        t = a
        for c in range(ncyc):
            start = a + c * per
            t = start
            for k, uk in enumerate(u):
                if uk <= 0:
                    continue
                push(t, t + uk * per, k + 1)
                t += uk * per
            t = start + per
        push(t, b, int(np.argmax(u)) + 1)
    if out:
        # absorb rounding so the signal ends exactly at the schedule horizon
        a, _, k = out[-1]
        out[-1] = (a, sched.horizon, k)
    return SwitchSignal(tuple(out))


# --- compiled right-hand side -----------------------------------------------


class _PolySystem:
    """Evaluate many polynomials in the same variables with one power table."""

    def __init__(self, polys: list[Polynomial], nvars: int):
        exps = sorted({e for q in polys for e in q.terms} | {(0,) * nvars})
        col = {e: j for j, e in enumerate(exps)}
        self.E = np.array(exps, dtype=float)
        self.C = np.zeros((len(polys), len(exps)))
        for i, q in enumerate(polys):
            for e, c in q.terms.items():
                self.C[i, col[e]] = c

    def __call__(self, pt: np.ndarray) -> np.ndarray:
        return self.C @ np.prod(pt ** self.E, axis=1)


@dataclass
class _Moments:
    """Occupation-moment integrands in scaled time ``s = t / T_h`` and
    normalized state ``z = (x - offset) / scale``."""

    exps: np.ndarray
    time_scale: float
    offset: np.ndarray
    scale: np.ndarray

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        pt = np.concatenate([[t / self.time_scale], (x - self.offset) / self.scale])
        return np.prod(pt ** self.exps, axis=1) / self.time_scale


# --- trajectories ------------------------------------------------------------


@dataclass
class Trajectory:
    t: np.ndarray                    # (N,)
    x: np.ndarray                    # (N, n)
    running_cost: np.ndarray         # (N,)
    densities: np.ndarray            # (N, m), active on the step ending at each sample
    terminal_time: float
    total_cost: float
    max_violation: float             # largest state-set residual (<= 0 means admissible)
    terminal_residual: float         # terminal-set residual at the final sample
    reached: bool                    # final sample lies in the terminal set
    occupation_moments: np.ndarray | None = field(default=None, repr=False)

    @property
    def samples(self) -> list[tuple[float, np.ndarray, float]]:
        return [(float(t), x, float(c)) for t, x, c in zip(self.t, self.x, self.running_cost)]

    @property
    def final_state(self) -> np.ndarray:
        return self.x[-1]

    def to_csv(self, path) -> None:
        n, m = self.x.shape[1], self.densities.shape[1]
        header = (["t"] + [f"x_{i + 1}" for i in range(n)] + ["running_cost"]
                  + [f"u_{k + 1}" for k in range(m)])
        rows = [[float(t), *xs.tolist(), float(c), *u.tolist()]
                for t, xs, c, u in zip(self.t, self.x, self.running_cost, self.densities)]
        atomic_write_text(path, csv_text(header, rows))


def _initial_state(p: SwitchedProblem) -> np.ndarray:
    x0 = p.initial_set.singleton()
    if x0 is None:
        raise ValueError("simulation needs a single initial state")
    return np.array(x0, dtype=float)


def _integrate(p: SwitchedProblem, segments, step: float | None, check_step: bool,
               terminal_tolerance: float, moments: _Moments | None,
               stop_on_entry: bool | None = None) -> Trajectory:
    n, m = p.n, p.m
    x0 = _initial_state(p)
    horizon = segments[-1][1] if segments else 0.0
    if step is None:
        step = horizon / DEFAULT_STEPS if horizon > 0 else 1.0
    if step <= 0:
        raise ValueError("step must be positive")
    if check_step:
        shortest = min((b - a for a, b, _ in segments if b > a), default=np.inf)
        if step > shortest * (1 + 1e-12):
            raise SimulationError(
                f"step {step:g} exceeds the shortest segment {shortest:g}")
    if stop_on_entry is None:
        stop_on_entry = p.is_free

    system = _PolySystem([f for md in p.modes for f in md.field]
                         + [md.lagrangian for md in p.modes], n + 1)
    nmom = 0 if moments is None else len(moments.exps)

    def rhs(t, z, u):
        vals = system(np.concatenate([[t], z[:n]]))
        fx = vals[:m * n].reshape(m, n)
        lk = vals[m * n:]
        out = np.empty_like(z)
        out[:n] = u @ fx
        out[n] = u @ lk
        if nmom:
            mono = moments(t, z[:n])
            out[n + 1:] = np.outer(u, mono).ravel()
        return out

    z = np.zeros(n + 1 + m * nmom)
    z[:n] = x0
    ts, zs, us = [0.0], [z.copy()], [np.zeros(m)]
    state_res = [p.state_set.residual(x0)]
    reached = p.terminal_set.residual(x0) <= terminal_tolerance
    done = stop_on_entry and reached
    # overflow surfaces as a nonfinite state and is reported as such
    with np.errstate(over="ignore", invalid="ignore"):
        for a, b, u in segments:
            if done or b <= a:
                continue
            u = np.asarray(u, dtype=float)
            k = max(1, ceil((b - a) / step - 1e-9))
            h = (b - a) / k
            for i in range(k):
                t = a + i * h
                k1 = rhs(t, z, u)
                k2 = rhs(t + h / 2, z + h / 2 * k1, u)
                k3 = rhs(t + h / 2, z + h / 2 * k2, u)
                k4 = rhs(t + h, z + h * k3, u)
                z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                if not np.all(np.isfinite(z)):
                    raise SimulationError(f"state became nonfinite at t = {t + h:g}")
                tn = b if i == k - 1 else a + (i + 1) * h
                ts.append(tn)
                zs.append(z.copy())
                us.append(u)
                state_res.append(p.state_set.residual(z[:n]))
                if stop_on_entry and p.terminal_set.residual(z[:n]) <= terminal_tolerance:
                    reached = True
                    done = True
                    break
    Z = np.array(zs)
    term = p.terminal_set.residual(Z[-1, :n])
    occ = None
    if nmom:
        occ = Z[-1, n + 1:].reshape(m, nmom)
    return Trajectory(
        t=np.array(ts), x=Z[:, :n], running_cost=Z[:, n], densities=np.array(us),
        terminal_time=float(ts[-1]), total_cost=float(Z[-1, n]),
        max_violation=float(max(state_res)), terminal_residual=float(term),
        reached=bool(term <= terminal_tolerance), occupation_moments=occ)


def simulate_relaxed(p: SwitchedProblem, sched: Schedule, step: float | None = None,
                     terminal_tolerance: float = 0.0, extend_to: float | None = None,
                     moment_degree: int | None = None, state_offset=None,
                     state_scale=None) -> Trajectory:
    """Integrate ``x' = sum_k u_k f_k`` under the piecewise-constant ``sched``.

    For a free horizon the run stops at the first sample inside the terminal
    set (residual <= ``terminal_tolerance``).  ``extend_to`` holds the last
    segment's densities beyond the schedule end, up to that time, when the
    terminal set has not been reached yet.  ``moment_degree`` additionally
    integrates the occupation moments of each mode (see
    :func:`occupation_vector`).
    """
    sched.check_simplex(1e-9)
    if sched.m != p.m:
        raise ValueError(f"schedule has {sched.m} modes, problem has {p.m}")
    segments = list(sched.segments)
    moments = _moment_integrand(p, moment_degree, state_offset, state_scale)
    traj = _integrate(p, segments, step, True, terminal_tolerance, moments)
    if (extend_to is not None and p.is_free and not traj.reached and segments
            and extend_to > sched.horizon):
        a = sched.horizon
        longer = segments + [(a, float(extend_to), segments[-1][2])]
        step_ = step if step is not None else sched.horizon / DEFAULT_STEPS
        ext = _integrate(p, longer, step_, True, terminal_tolerance, moments)
        if ext.reached:
            return ext
    return traj


def simulate_switched(p: SwitchedProblem, sig: SwitchSignal, step: float | None = None,
                      terminal_tolerance: float = 0.0, extend_to: float | None = None
                      ) -> Trajectory:
    """Integrate the switched system ``x' = f_sigma(t)(t, x)``.

    Steps are aligned to every switching instant; intervals shorter than
    ``step`` get a single step of their own length.
    """
    segments = sig.as_segments(p.m)
    if not segments:
        x0 = _initial_state(p)
        return Trajectory(np.zeros(1), x0[None, :], np.zeros(1), np.zeros((1, p.m)),
                          0.0, 0.0, p.state_set.residual(x0),
                          p.terminal_set.residual(x0),
                          p.terminal_set.residual(x0) <= terminal_tolerance)
    traj = _integrate(p, segments, step, False, terminal_tolerance, None)
    if (extend_to is not None and p.is_free and not traj.reached
            and extend_to > sig.horizon):
        longer = segments + [(sig.horizon, float(extend_to), segments[-1][2])]
        step_ = step if step is not None else sig.horizon / DEFAULT_STEPS
        ext = _integrate(p, longer, step_, False, terminal_tolerance, None)
        if ext.reached:
            return ext
    return traj


def _moment_integrand(p, degree, offset, scale) -> _Moments | None:
    if degree is None:
        return None
    exps = np.array(monomial_basis(p.n + 1, degree), dtype=float)
    off = np.zeros(p.n) if offset is None else np.asarray(offset, dtype=float)
    sc = np.ones(p.n) if scale is None else np.asarray(scale, dtype=float)
    return _Moments(exps, p.horizon_length, off, sc)


def occupation_vector(p: SwitchedProblem, sched: Schedule, prog, step: float | None = None
                      ) -> np.ndarray:
    """Moment vector of the measures generated by one simulated trajectory.

    Laid out like the unknowns of the relaxation ``prog``: the mode blocks
    hold the integrated occupation moments and the terminal block the Dirac
    at the final time and state.  Coordinates follow the program's time and
    state normalization.
    """
    layout = prog.layout
    meta = prog.metadata
    d = layout.order
    off = np.asarray(meta.get("state_offset", np.zeros(p.n)))
    sc = np.asarray(meta.get("state_scale", np.ones(p.n)))
    traj = simulate_relaxed(p, sched, step, terminal_tolerance=0.0,
                            moment_degree=2 * d, state_offset=off, state_scale=sc)
    y = np.zeros(layout.num_vars)
    for k in range(p.m):
        blk = layout.offsets[layout.index(f"mu_{k + 1}")]
        y[blk:blk + traj.occupation_moments.shape[1]] = traj.occupation_moments[k]
    exps = np.array(monomial_basis(p.n + 1, 2 * d), dtype=float)
    end = np.concatenate([[traj.terminal_time / p.horizon_length],
                          (traj.final_state - off) / sc])
    i = layout.index("mu_T")
    y[layout.offsets[i]:layout.offsets[i] + len(exps)] = np.prod(end ** exps, axis=1)
    return y


# --- certification -----------------------------------------------------------


@dataclass(frozen=True)
class GapReport:
    cost: float
    bound: float
    absolute: float
    relative: float
    valid: bool                      # cost >= bound - 1e-6
    near_optimal: bool               # relative gap <= 1 %


def certify_gap(cost: float, bound: float) -> GapReport:
    """Compare an achieved cost with a lower bound."""
    gap = cost - bound
    rel = gap / abs(bound) if bound != 0 else (0.0 if gap == 0 else np.inf)
    valid = cost >= bound - BOUND_SLACK
    if not valid:
        log.warning("cost %.8g is below the lower bound %.8g", cost, bound)
    return GapReport(float(cost), float(bound), float(gap), float(rel), bool(valid),
                     bool(valid and rel <= NEAR_OPTIMAL_GAP))
