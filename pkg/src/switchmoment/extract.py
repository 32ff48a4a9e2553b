"""From optimal moments to switching schedules.

The time marginal of each mode measure is the density ``u_k(s) ds`` on the
scaled interval ``[0, 1]``.  Extending ``u_k`` by zero outside its support,
its distributional derivative is a signed sum of Diracs at the switching
instants, whose moments follow from the time moments by integration by parts::

    int s^a du_k = -a * y_{k, a-1}

A Hankel pencil on those moments gives the jump locations and sizes, and a
running sum of jumps rebuilds the piecewise-constant density.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from math import factorial

import numpy as np
import scipy.linalg
import scipy.optimize

from ._io import atomic_write_text, csv_text
from .relax import MeasureLayout
from .sdp import ConicSolution

log = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-4
MERGE_DISTANCE = 1e-3
PRUNE_WEIGHT = 1e-3
ILL_CONDITIONED = 1e-3


class ExtractionError(ValueError):
    """Moments are unusable for schedule recovery."""


@dataclass(frozen=True)
class MarginalMoments:
    """Time moments ``y[k, a] = int s^a u_k(s) ds`` in scaled time."""

    y: np.ndarray                    # (m, 2d + 1)
    time_scale: float = 1.0

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def masses(self) -> np.ndarray:
        """Time spent in each mode, in unscaled units."""
        return self.y[:, 0] * self.time_scale

    @property
    def terminal_time(self) -> float:
        """Unscaled final time implied by the marginal constraint."""
        return float(self.y[:, 0].sum() * self.time_scale)

    def hankel_min_eig(self) -> np.ndarray:
        """Smallest eigenvalue of each mode's Hankel moment matrix."""
        h = (self.y.shape[1] - 1) // 2
        out = []
        for yk in self.y:
            H = scipy.linalg.hankel(yk[:h + 1], yk[h:2 * h + 1])
            out.append(np.linalg.eigvalsh(H)[0])
        return np.array(out)


@dataclass(frozen=True)
class AtomicMeasure:
    """Signed sum of Diracs ``sum_j w_j delta_{t_j}``."""

    atoms: np.ndarray
    weights: np.ndarray
    residual: float = 0.0
    ill_conditioned: bool = False

    def __len__(self) -> int:
        return len(self.atoms)

    def moments(self, count: int) -> np.ndarray:
        return np.array([np.sum(self.weights * self.atoms ** a) for a in range(count)])

    def to_csv(self, path) -> None:
        atomic_write_text(path, csv_text(["atom", "weight"], zip(self.atoms.tolist(),
                                                                 self.weights.tolist())))


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant mode densities.

    ``densities[j]`` applies on ``[breakpoints[j], breakpoints[j + 1])`` and
    each row lies on the unit simplex.  Times are unscaled.
    """

    breakpoints: np.ndarray          # (S + 1,)
    densities: np.ndarray            # (S, m)

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        u = np.atleast_2d(np.asarray(self.densities, dtype=float))
        if u.size == 0:
            u = u.reshape(0, u.shape[-1] if u.ndim == 2 else 1)
        if len(bp) != len(u) + 1 and not (len(bp) <= 1 and len(u) == 0):
            raise ValueError("need one more breakpoint than segments")
        if np.any(np.diff(bp) < 0):
            raise ValueError("breakpoints must be sorted")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "densities", u)

    @property
    def m(self) -> int:
        return self.densities.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1]) if len(self.breakpoints) else 0.0

    @property
    def segments(self) -> list[tuple[float, float, np.ndarray]]:
        bp = self.breakpoints
        return [(float(bp[j]), float(bp[j + 1]), self.densities[j])
                for j in range(len(self.densities))]

    def masses(self) -> np.ndarray:
        """``int u_k dt`` per mode."""
        if not len(self.densities):
            return np.zeros(self.m)
        return np.diff(self.breakpoints) @ self.densities

    def at(self, t: float) -> np.ndarray:
        j = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        j = min(max(j, 0), len(self.densities) - 1)
        return self.densities[j]

    def check_simplex(self, tol: float = 1e-9) -> None:
        u = self.densities
        if np.any(u < -tol) or np.any(np.abs(u.sum(axis=1) - 1.0) > tol):
            raise ValueError("schedule densities are not on the simplex")

    def to_csv(self, path) -> None:
        header = ["t_start", "t_end"] + [f"u_{k + 1}" for k in range(self.m)]
        rows = [[a, b, *u.tolist()] for a, b, u in self.segments]
        atomic_write_text(path, csv_text(header, rows))


# --- moments --------------------------------------------------------------


def time_marginal_moments(sol: ConicSolution, layout: MeasureLayout) -> MarginalMoments:
    """Collect ``int s^a dmu_k`` for every mode from a solved relaxation."""
    if not sol.ok:
        raise ExtractionError(f"solution status {sol.status} has no usable moments")
    deg = 2 * layout.order
    nv = layout.n + 1
    y = np.array([[layout.moment(sol.moments, f"mu_{k}", (a,) + (0,) * (nv - 1))
                   for a in range(deg + 1)] for k in range(1, layout.m + 1)])
    return MarginalMoments(y, layout.time_scale)


def derivative_moments(y) -> np.ndarray:
    """Moments of ``du`` for a density with moments ``y``; one entry longer than ``y``."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) < 2:
        raise ValueError("need at least two moments")
    out = np.zeros(len(y) + 1)
    a = np.arange(1, len(y) + 1)
    out[1:] = -a * y
    return out


def moments_of_schedule(breakpoints, densities, count: int) -> np.ndarray:
    """Exact ``int s^a u_k(s) ds`` for a piecewise-constant schedule, shape (m, count)."""
    bp = np.asarray(breakpoints, dtype=float)
    u = np.atleast_2d(np.asarray(densities, dtype=float))
    a = np.arange(count)
    seg = (bp[1:, None] ** (a + 1) - bp[:-1, None] ** (a + 1)) / (a + 1)   # (S, count)
    return u.T @ seg


# --- atoms ----------------------------------------------------------------


def prony_decompose(yprime, rank_tolerance: float = RANK_TOLERANCE,
                    merge_distance: float = MERGE_DISTANCE) -> AtomicMeasure:
    """Signed atoms ``t_j, w_j`` with ``sum_j w_j t_j^a = yprime[a]``.

    Matrix-pencil method: with ``H0[i, j] = yprime[i + j]`` and ``H1`` the
    same shifted by one, the atoms are the eigenvalues of the pencil
    compressed to the numerical rank of ``H0``.
    """
    yp = np.asarray(yprime, dtype=float)
    if yp.ndim != 1 or len(yp) < 3:
        raise ValueError("need at least three derivative moments")
    empty = AtomicMeasure(np.zeros(0), np.zeros(0))
    if not np.any(yp):
        return empty
    L = len(yp) - 1
    cols = (L + 1) // 2
    rows = L + 1 - cols
    H0 = np.array([[yp[i + j] for j in range(cols)] for i in range(rows)])
    H1 = np.array([[yp[i + j + 1] for j in range(cols)] for i in range(rows)])
    U, sv, Vt = np.linalg.svd(H0, full_matrices=False)
    r = int(np.sum(sv > rank_tolerance * sv[0]))
    if r == 0:
        return empty
    Ur, Vr = U[:, :r], Vt[:r].T
    pencil = (Ur.T @ H1 @ Vr) / sv[:r]
    z = np.linalg.eigvals(pencil)
    t = np.sort(z.real)
    if np.max(np.abs(z.imag), initial=0.0) > 1e-6:
        log.info("complex pencil eigenvalues, keeping real parts")

    t, w = _fit_weights(yp, t)
    t, w = _merge(t, w, merge_distance)
    keep = np.abs(w) > PRUNE_WEIGHT * max(np.max(np.abs(w), initial=0.0), 1e-300)
    t, w = t[keep], w[keep]
    t, w = _fit_weights(yp, t)
    res = _residual(yp, t, w)
    return AtomicMeasure(t, w, res, res > ILL_CONDITIONED)


def _fit_weights(yp, t):
    if not len(t):
        return t, np.zeros(0)
    V = np.vander(t, len(yp), increasing=True).T
    w = np.linalg.lstsq(V, yp, rcond=None)[0]
    return t, w


def _residual(yp, t, w) -> float:
    if not len(t):
        return float(np.max(np.abs(yp)))
    V = np.vander(t, len(yp), increasing=True).T
    return float(np.max(np.abs(V @ w - yp)) / max(1.0, np.max(np.abs(yp))))


def _merge(t, w, dist):
    if len(t) < 2:
        return t, w
    groups: list[list[int]] = [[0]]
    for j in range(1, len(t)):
        if t[j] - t[groups[-1][-1]] < dist:
            groups[-1].append(j)
        else:
            groups.append([j])
    tt, ww = [], []
    for g in groups:
        wg = w[g]
        # weighted location when weights agree in sign, else the mean
        if np.all(wg > 0) or np.all(wg < 0):
            tt.append(float(np.sum(t[g] * wg) / np.sum(wg)))
        else:
            tt.append(float(np.mean(t[g])))
        ww.append(float(np.sum(wg)))
    return np.array(tt), np.array(ww)


def _hankel_pair(seq, rows: int, cols: int):
    H0 = np.array([[seq[i + j] for j in range(cols)] for i in range(rows)])
    H1 = np.array([[seq[i + j + 1] for j in range(cols)] for i in range(rows)])
    return H0, H1


def joint_decompose(marg: MarginalMoments, rank_tolerance: float = RANK_TOLERANCE,
                    merge_distance: float = MERGE_DISTANCE) -> list[AtomicMeasure]:
    """Jump measures of all modes on a shared set of switching instants.

    Every mode switches at the same instants and the endpoint jumps sit at
    ``0`` and ``s_end = sum_k y_{k,0}``, which are known.  Multiplying the
    derivative moments by ``t (t - s_end)`` annihilates the endpoint atoms,
    and stacking the Hankel matrices of all modes side by side yields one
    pencil whose eigenvalues are the interior switching instants.  Weights are
    then fitted per mode on the undeflated moments.
    """
    s_end = float(np.clip(marg.y[:, 0].sum(), 0.0, 1.0))
    yps = [derivative_moments(yk) for yk in marg.y]
    interior = np.zeros(0)
    defl = [yp[2:] - s_end * yp[1:-1] for yp in yps]
    L = len(defl[0]) - 1
    if L >= 1 and any(np.any(z) for z in defl):
        cols = (L + 1) // 2
        rows = L + 1 - cols
        pairs = [_hankel_pair(z, rows, cols) for z in defl]
        H0 = np.hstack([a for a, _ in pairs])
        H1 = np.hstack([b for _, b in pairs])
        U, sv, Vt = np.linalg.svd(H0, full_matrices=False)
        r = int(np.sum(sv > rank_tolerance * sv[0]))
        if r:
            z = np.linalg.eigvals((U[:, :r].T @ H1 @ Vt[:r].T) / sv[:r])
            z = z[np.abs(z.imag) <= 1e-6 + 1e-3 * np.abs(z.real)].real
            interior = np.sort(z[(z > merge_distance) & (z < s_end - merge_distance)])
    atoms = np.concatenate([[0.0], interior, [s_end]])
    atoms, _ = _merge(atoms, np.ones_like(atoms), merge_distance)
    out = []
    for yp in yps:
        t, w = _fit_weights(yp, atoms)
        keep = np.abs(w) > PRUNE_WEIGHT * max(np.max(np.abs(w), initial=0.0), 1e-300)
        t, w = _fit_weights(yp, t[keep])
        res = _residual(yp, t, w)
        out.append(AtomicMeasure(t, w, res, res > ILL_CONDITIONED))
    return out


# --- schedule -------------------------------------------------------------


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{u >= 0, sum u = 1}``."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def rebuild_schedule(atomics, marg: MarginalMoments,
                     merge_distance: float = MERGE_DISTANCE,
                     mass_tolerance: float = 5e-2) -> Schedule:
    """Piecewise-constant densities from per-mode jump measures.

    ``u_k`` is the running sum of jumps plus the constant that makes its
    integral equal ``y_{k,0}``; segments are delimited by the union of all
    jump locations inside ``[0, s_end]`` with ``s_end = sum_k y_{k,0}``.
    """
    m = marg.m
    if len(atomics) != m:
        raise ValueError("one atomic measure per mode required")
    s_end = float(np.clip(marg.y[:, 0].sum(), 0.0, 1.0))
    th = marg.time_scale
    if s_end <= 0:
        return Schedule(np.zeros(1), np.zeros((0, m)))
    if m == 1:
        return Schedule(np.array([0.0, s_end * th]), np.ones((1, 1)))
    for k, am in enumerate(atomics):
        scale = max(1.0, float(np.sum(np.abs(am.weights))))
        if abs(float(np.sum(am.weights))) > 1e-3 * scale:
            raise ExtractionError(
                f"jumps of mode {k + 1} do not telescope (sum {np.sum(am.weights):.3g})")

    cuts = [0.0, s_end]
    for am in atomics:
        cuts.extend(t for t in am.atoms if merge_distance < t < s_end - merge_distance)
    cuts = np.sort(np.array(cuts))
    bp = [cuts[0]]
    for c in cuts[1:]:
        if c - bp[-1] >= merge_distance:
            bp.append(c)
        else:
            bp[-1] = bp[-1] if bp[-1] == 0.0 else 0.5 * (bp[-1] + c)
    bp[-1] = s_end
    bp = np.array(bp)
    mids = 0.5 * (bp[:-1] + bp[1:])
    lengths = np.diff(bp)

    raw = np.zeros((len(mids), m))
    for k, am in enumerate(atomics):
        step = np.array([np.sum(am.weights[am.atoms <= s]) for s in mids])
        # additive constant matching the mass
        c = (marg.y[k, 0] - lengths @ step) / s_end
        raw[:, k] = step + c
    u = np.array([project_simplex(np.clip(r, 0.0, 1.0)) for r in raw])
    got = lengths @ u
    err = np.max(np.abs(got - marg.y[:, 0]))
    if err > mass_tolerance:
        raise ExtractionError(f"rebuilt masses off by {err:.3g} (scaled time)")
    return Schedule(bp * th, u)


def _segment_integrals(bp: np.ndarray, count: int) -> np.ndarray:
    a = np.arange(count)
    return (bp[1:, None] ** (a + 1) - bp[:-1, None] ** (a + 1)) / (a + 1)


def fit_densities(breakpoints, marg: MarginalMoments) -> tuple[np.ndarray, float]:
    """Simplex-valued segment densities best matching the time moments.

    ``breakpoints`` are in scaled time.  Solves
    ``min sum_{k,a} (sum_j U[j, k] int_{seg j} s^a ds - y[k, a])^2`` over rows
    of ``U`` on the simplex; returns ``U`` and the residual norm.
    """
    bp = np.asarray(breakpoints, dtype=float)
    I = _segment_integrals(bp, marg.y.shape[1])
    S, m = len(bp) - 1, marg.m
    if m == 1:
        U = np.ones((S, 1))
        return U, float(np.linalg.norm(U.T @ I - marg.y))

    def full(v):
        V = v.reshape(S, m - 1)
        return np.column_stack([V, 1.0 - V.sum(axis=1)])

    def obj(v):
        r = full(v).T @ I - marg.y
        return float(np.sum(r * r))

    def grad(v):
        r = full(v).T @ I - marg.y                     # (m, N)
        G = 2.0 * I @ r.T                              # dU -> (S, m)
        return (G[:, :m - 1] - G[:, m - 1:]).ravel()

    # the residual is affine in v: try the unconstrained least-squares solution
    # first and fall back to SLSQP only when it leaves the simplex
    r0 = full(np.zeros(S * (m - 1))).T @ I - marg.y
    M = np.zeros((r0.size, S * (m - 1)))
    for j in range(S):
        for k in range(m - 1):
            dr = np.zeros((m, I.shape[1]))
            dr[k] = I[j]
            dr[m - 1] = -I[j]
            M[:, j * (m - 1) + k] = dr.ravel()
    v_ls = np.linalg.lstsq(M, -r0.ravel(), rcond=None)[0]
    U_ls = full(v_ls)
    if U_ls.min() >= -1e-12:
        U = np.array([project_simplex(row) for row in U_ls])
        return U, float(np.linalg.norm(U.T @ I - marg.y))

    v0 = np.array([project_simplex(row) for row in U_ls])[:, :m - 1].ravel()
    cons =[{"type": "ineq", "fun": lambda v: 1.0 - v.reshape(S, m - 1).sum(axis=1)}]
    res = scipy.optimize.minimize(obj, v0, jac=grad, method="SLSQP",
                                  bounds=[(0.0, 1.0)] * len(v0), constraints=cons,
                                  options={"ftol": 1e-16, "maxiter": 1000})
    U = np.array([project_simplex(row) for row in full(res.x)])
    return U, float(np.sqrt(obj(res.x)))


def refine_breakpoints(breakpoints, marg: MarginalMoments) -> np.ndarray:
    """Move interior breakpoints (scaled time) to best match the moments."""
    bp = np.asarray(breakpoints, dtype=float)
    if len(bp) <= 2:
        return bp
    lo, hi = bp[0], bp[-1]

    def resid(inner):
        b = np.concatenate([[lo], np.sort(inner), [hi]])
        U, _ = fit_densities(b, marg)
        return (U.T @ _segment_integrals(b, marg.y.shape[1]) - marg.y).ravel()

    eps = 1e-9 * max(hi, 1e-300)
    r = scipy.optimize.least_squares(resid, bp[1:-1], bounds=(lo + eps, hi - eps))
    return np.concatenate([[lo], np.sort(r.x), [hi]])


def extract_schedule(marg: MarginalMoments, rank_tolerance: float = RANK_TOLERANCE,
                     joint: bool = True, refit: bool = True, refine: bool = False
                     ) -> tuple[Schedule, list[AtomicMeasure]]:
    """Derivative moments, atoms, schedule.

    ``joint`` uses :func:`joint_decompose`; otherwise each mode is
    decomposed on its own with :func:`prony_decompose`.  With ``refit`` the
    breakpoints from the atoms are kept but the segment densities are fitted
    to the time moments directly (:func:`fit_densities`), which stays
    well-conditioned when two switching instants are close; ``refine`` also
    adjusts the breakpoints.  Without ``refit`` densities come from the
    running sum of jumps (:func:`rebuild_schedule`).
    """
    if joint:
        atomics = joint_decompose(marg, rank_tolerance)
    else:
        atomics = [prony_decompose(derivative_moments(yk), rank_tolerance)
                   for yk in marg.y]
    if not refit:
        return rebuild_schedule(atomics, marg), atomics
    s_end = float(np.clip(marg.y[:, 0].sum(), 0.0, 1.0))
    if s_end <= 0:
        return Schedule(np.zeros(1), np.zeros((0, marg.m))), atomics
    cuts = np.concatenate([[0.0, s_end]] + [am.atoms for am in atomics])
    cuts = np.sort(cuts[(cuts >= 0) & (cuts <= s_end)])
    bp, _ = _merge(cuts, np.ones_like(cuts), MERGE_DISTANCE)
    bp[0], bp[-1] = 0.0, s_end
    if refine:
        bp = refine_breakpoints(bp, marg)
    U, _ = fit_densities(bp, marg)
    return Schedule(bp * marg.time_scale, U), atomics


# --- Fourier diagnostic ---------------------------------------------------


def fft_density(y, grid_size: int, tail_tolerance: float = 1e-6) -> np.ndarray:
    """Sample a density on ``[0, 1)`` from its moments via its Fourier series.

    The Fourier coefficient at integer frequency ``k`` is the Fourier
    transform at ``2 pi k``, whose Taylor coefficients are the moments:
    ``c_k = sum_a (-2 pi i k)^a y_a / a!``.  Frequencies whose truncated
    series has a last term above ``tail_tolerance`` are dropped; a warning is
    issued if that leaves only the mean.
    """
    y = np.asarray(y, dtype=float)
    N = len(y)
    if grid_size < N or grid_size & (grid_size - 1):
        raise ValueError("grid_size must be a power of two at least len(y)")
    if not np.any(y):
        return np.zeros(grid_size)
    fact = np.array([float(factorial(a)) for a in range(N)])
    scale = max(abs(y[0]), 1e-300)
    coeffs = np.zeros(grid_size, dtype=complex)
    kmax = 0
    for k in range(grid_size // 2):
        w = -2j * np.pi * k
        terms = w ** np.arange(N) * y / fact
        if k and abs(terms[-1]) > tail_tolerance * scale:
            break
        coeffs[k] = terms.sum()
        if k:
            coeffs[-k] = np.conj(coeffs[k])
        kmax = k
    if kmax == 0 and N > 1:
        warnings.warn("moment sequence too short to resolve any nonzero frequency; "
                      "returning the mean only", RuntimeWarning, stacklevel=2)
    return np.real(np.fft.ifft(coeffs) * grid_size)
