"""Dense primal-dual interior-point solver for block semidefinite programs.

Problem form (the "primal" is the moment problem)::

    minimize    c'x
    subject to  A x = b
                S_j = F0_j + sum_i x_i F_ij  is PSD for every block j

with dual::

    maximize    b'y - sum_j <F0_j, Z_j>
    subject to  A'y + sum_j F_j^*(Z_j) = c,   Z_j PSD.

The method is a homogeneous self-dual embedding with Nesterov-Todd scaling and
a Mehrotra predictor-corrector.  The embedding keeps infeasible problems well
posed: when ``tau -> 0`` the iterates converge to a Farkas-type certificate.
All linear algebra is dense; each iteration factors one saddle-point system
``[[H, A'], [A, 0]]`` where ``H = F^* P F`` is the scaled Schur complement.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .relax import ConicProgram, reduce_rows

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    NEAR_OPTIMAL = "NearOptimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    ITERATION_LIMIT = "IterationLimit"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 200
    feasibility_tolerance: float = 1e-8
    duality_gap_tolerance: float = 1e-8
    step_fraction: float = 0.98
    verbosity: int = 0

    def __post_init__(self):
        if self.feasibility_tolerance <= 0 or self.duality_gap_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


@dataclass
class ConicSolution:
    status: Status
    moments: np.ndarray              # primal x (the moment vector)
    objective: float
    dual_eq: np.ndarray              # multipliers y of A x = b
    dual_psd: list[np.ndarray]       # Z_j
    residuals: dict
    iterations: int
    dual_objective: float = float("nan")
    history: list[dict] = field(default_factory=list)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.NEAR_OPTIMAL)


# --- block helpers -------------------------------------------------------


class _Blocks:
    """Affine map x -> F0 + F(x) over a list of PSD blocks (scaled copy)."""

    def __init__(self, idx, F, F0, nvars):
        self.idx = idx
        self.F = F
        self.F0 = F0
        self.sizes = [f0.shape[0] for f0 in F0]
        self.nvars = nvars

    def op(self, x):
        return [np.tensordot(x[i], F, axes=1) if len(i) else np.zeros_like(F0)
                for i, F, F0 in zip(self.idx, self.F, self.F0)]

    def adj(self, Z):
        out = np.zeros(self.nvars)
        for i, F, Zj in zip(self.idx, self.F, Z):
            if len(i):
                np.add.at(out, i, np.tensordot(F, Zj, axes=([1, 2], [0, 1])))
        return out


def _inner(U, V) -> float:
    return float(sum(np.vdot(u, v) for u, v in zip(U, V)))


def _fro(U) -> float:
    return float(np.sqrt(sum(np.vdot(u, u) for u in U)))


def _sym(M):
    return 0.5 * (M + M.T)


def _jordan(U, V):
    return 0.5 * (U @ V + V @ U)


class _Scaling:
    """Nesterov-Todd scaling ``r`` with ``r' Z r = r^-1 S r^-T = diag(lam)``."""

    def __init__(self, S, Z):
        Ls = np.linalg.cholesky(S)
        Lz = np.linalg.cholesky(Z)
        self.Ls, self.Lz = Ls, Lz
        U, lam, Vt = np.linalg.svd(Lz.T @ Ls)
        isq = 1.0 / np.sqrt(lam)
        self.lam = lam
        self.r = (Ls @ Vt.T) * isq
        self.rinv = (U.T @ Lz.T) * isq[:, None]
        self.P = self.r @ self.r.T
        self.Pi = self.rinv.T @ self.rinv

    def proj(self, M):
        return self.Pi @ M @ self.Pi


def _max_step(L, D) -> float:
    # largest a with L L' + a D PSD, L lower triangular
    M = scipy.linalg.solve_triangular(L, D, lower=True)
    M = scipy.linalg.solve_triangular(L, M.T, lower=True)
    lo = np.linalg.eigvalsh(_sym(M))[0]
    return np.inf if lo >= 0 else -1.0 / lo


# --- residual report -----------------------------------------------------


def kkt_residuals(prog: ConicProgram, sol: ConicSolution) -> dict:
    """Recompute optimality residuals of ``sol`` directly from ``prog``."""
    x = np.asarray(sol.moments, dtype=float)
    if x.shape != (prog.num_vars,):
        raise ValueError("solution length does not match the program")
    A = prog.A.toarray() if hasattr(prog.A, "toarray") else np.asarray(prog.A)
    y = np.asarray(sol.dual_eq, dtype=float)
    S = [blk.evaluate(x) for blk in prog.blocks]
    out = {
        "primal_equality": float(np.max(np.abs(A @ x - prog.b), initial=0.0)),
        "primal_min_eig": [float(np.linalg.eigvalsh(s)[0]) for s in S],
    }
    Z = sol.dual_psd
    if Z is not None and len(Z) == len(prog.blocks) and y.shape == (A.shape[0],):
        adj = np.zeros(prog.num_vars)
        for blk, Zj in zip(prog.blocks, Z):
            if len(blk.var_idx):
                np.add.at(adj, blk.var_idx,
                          np.tensordot(blk.coeffs, Zj, axes=([1, 2], [0, 1])))
        out["dual_equality"] = float(np.max(np.abs(prog.c - A.T @ y - adj), initial=0.0))
        out["dual_min_eig"] = [float(np.linalg.eigvalsh(z)[0]) for z in Z]
        out["gap"] = float(sum(np.vdot(s, z) for s, z in zip(S, Z)))
        out["primal_objective"] = float(prog.c @ x)
        out["dual_objective"] = float(prog.b @ y - sum(np.vdot(blk.const, z)
                                                       for blk, z in zip(prog.blocks, Z)))
    out["min_eig"] = min(out["primal_min_eig"], default=0.0)
    return out


# --- solver --------------------------------------------------------------


def _prepare(prog: ConicProgram):
    A = prog.A.toarray() if hasattr(prog.A, "toarray") else np.asarray(prog.A, float)
    b = np.asarray(prog.b, float)
    n = prog.num_vars
    rnorm = np.linalg.norm(A, axis=1) if A.size else np.zeros(0)
    rnorm[rnorm == 0] = 1.0
    As, bs = A / rnorm[:, None], b / rnorm
    # column equilibration over equalities and PSD blocks
    col = np.sum(As ** 2, axis=0)
    for blk in prog.blocks:
        if len(blk.var_idx):
            np.add.at(col, blk.var_idx, np.sum(blk.coeffs ** 2, axis=(1, 2)))
    col = np.sqrt(col)
    D = np.where(col > 0, 1.0 / np.where(col > 0, col, 1.0), 1.0)
    As = As * D
    cs = prog.c * D
    idx = [blk.var_idx for blk in prog.blocks]
    F = [blk.coeffs * D[blk.var_idx][:, None, None] for blk in prog.blocks]
    F0 = [blk.const.copy() for blk in prog.blocks]
    log.debug("column scaling spread %.2e", D.max() / D.min() if n else 1.0)
    return As, bs, rnorm, D, cs, _Blocks(idx, F, F0, n)


def solve_conic(prog: ConicProgram, settings: SolverSettings | None = None) -> ConicSolution:
    """Solve ``prog`` and return a :class:`ConicSolution`.

    Numerical breakdowns end the run with ``IterationLimit`` (or
    ``NearOptimal`` when the last iterate already meets relaxed tolerances)
    and a diagnostic message; they never raise.
    """
    st = settings or SolverSettings()
    A, b, rnorm, D, c, blk = _prepare(prog)
    n = prog.num_vars
    nrows_full = A.shape[0]

    keep, inconsistent = reduce_rows(A, b)
    if inconsistent:
        # Farkas vector: w with A'w = 0 and b'w > 0
        xls, *_ = np.linalg.lstsq(A, b, rcond=None)
        w = b - A @ xls
        w = w / (w @ b)
        return ConicSolution(Status.PRIMAL_INFEASIBLE, np.full(n, np.nan), np.nan,
                             w / rnorm, [np.zeros((s, s)) for s in blk.sizes],
                             {"certificate_residual": float(np.abs(A.T @ w).max())}, 0,
                             message="inconsistent equality constraints")
    A, b = A[keep], b[keep]
    p = A.shape[0]

    nu = sum(blk.sizes)
    row_slices = []
    lo = 0
    for sz in blk.sizes:
        row_slices.append((lo, lo + sz * sz))
        lo += sz * sz
    nrow_g = lo
    # orthonormal split of R^n into range(A') and null(A)
    if p:
        Qa, R1 = np.linalg.qr(A.T, mode="complete")
        Q1, Nb = Qa[:, :p], Qa[:, p:]
        R1 = R1[:p]
    else:
        Q1, R1, Nb = np.zeros((n, 0)), np.zeros((0, 0)), np.eye(n)
    nb = max(1.0, np.linalg.norm(b))
    nc = max(1.0, np.linalg.norm(c))
    nF0 = max(1.0, _fro(blk.F0))
    ftol, gtol = st.feasibility_tolerance, st.duality_gap_tolerance

    x = np.zeros(n)
    y = np.zeros(p)
    S = [np.eye(s) for s in blk.sizes]
    Z = [np.eye(s) for s in blk.sizes]
    tau, kappa = 1.0, 1.0

    history: list[dict] = []
    status, message = Status.ITERATION_LIMIT, "iteration limit reached"
    best = None
    it = 0

    def metrics():
        Fx = blk.op(x)
        rx = c * tau - A.T @ y - blk.adj(Z)
        ry = A @ x - b * tau
        rs = [Sj - F0 * tau - fx for Sj, F0, fx in zip(S, blk.F0, Fx)]
        cx, by, fz = c @ x, b @ y, _inner(blk.F0, Z)
        rt = kappa - by + fz + cx
        gap = _inner(S, Z)
        m = {
            "pres": max(np.linalg.norm(ry) / nb, _fro(rs) / nF0) / tau,
            "dres": np.linalg.norm(rx) / nc / tau,
            "gap": gap / tau ** 2,
            "pobj": cx / tau,
            "dobj": (by - fz) / tau,
            "tau": tau, "kappa": kappa,
        }
        hres_x = np.linalg.norm(A.T @ y + blk.adj(Z)) / nc
        m["pinf"] = hres_x / (by - fz) if by - fz > 0 else None
        hres_s = max(np.linalg.norm(A @ x) / nb,
                     _fro([Sj - fx for Sj, fx in zip(S, Fx)]) / nF0)
        m["dinf"] = hres_s / (-cx) if cx < 0 else None
        return m, rx, ry, rs, rt

    while True:
        m, rx, ry, rs, rt = metrics()
        m["iter"] = it
        history.append(m)
        if st.verbosity > 0:
            log.info("iter=%d pobj=%.8e dobj=%.8e gap=%.2e pres=%.2e dres=%.2e "
                     "tau=%.2e kappa=%.2e", it, m["pobj"], m["dobj"], m["gap"],
                     m["pres"], m["dres"], tau, kappa)
        scale = max(1.0, abs(m["pobj"]))
        if (m["pres"] <= ftol and m["dres"] <= ftol
                and (m["gap"] <= gtol * scale or abs(m["pobj"] - m["dobj"]) <= gtol * scale)):
            status, message = Status.OPTIMAL, "converged"
            break
        if m["pinf"] is not None and m["pinf"] <= ftol:
            status, message = Status.PRIMAL_INFEASIBLE, "primal infeasibility certificate"
            break
        if m["dinf"] is not None and m["dinf"] <= ftol:
            status, message = Status.DUAL_INFEASIBLE, "dual infeasibility (improving ray)"
            break
        if _near(m, 1e3 * ftol, 1e3 * gtol) and (best is None or _merit(m) < _merit(best[0])):
            best = (m, x.copy(), y.copy(), [s.copy() for s in S],
                    [z.copy() for z in Z], tau, kappa)
        if it >= st.max_iterations:
            break
        it += 1
        try:
            W = [_Scaling(Sj, Zj) for Sj, Zj in zip(S, Z)]
            # scaled constraint matrix: column i of block j is rinv F_ij rinv'
            Gt = np.zeros((nrow_g, n))
            for (lo, hi), i, F, w in zip(row_slices, blk.idx, blk.F, W):
                if len(i):
                    Gt[lo:hi, i] = np.matmul(np.matmul(w.rinv, F), w.rinv.T).reshape(len(i), -1).T
            M = Gt @ Nb
            Qm, Rm = np.linalg.qr(M)
            if np.min(np.abs(np.diag(Rm)), initial=np.inf) <= 1e-14 * np.max(np.abs(np.diag(Rm)), initial=1.0):
                raise np.linalg.LinAlgError("reduced Newton system is singular")

            def flat(mats):
                return np.concatenate([mm.ravel() for mm in mats]) if mats else np.zeros(0)

            def unflat(v):
                return [v[lo:hi].reshape(sz, sz) for (lo, hi), sz in zip(row_slices, blk.sizes)]

            def newton(et, g, h):
                # solve Gt'(Gt dx - et) - A'dy = g, A dx = h by least squares on
                # the null space of A; returns dx, dy and u = Gt dx - et
                dxp = Q1 @ scipy.linalg.solve_triangular(R1, h, trans="T") if p else np.zeros(n)
                u0 = Gt @ dxp - et
                t = scipy.linalg.solve_triangular(Rm, Nb.T @ g, trans="T")
                z = scipy.linalg.solve_triangular(Rm, t - Qm.T @ u0)
                dx = dxp + Nb @ z
                u = Gt @ dx - et
                for _ in range(1):
                    # refinement on the reduced equation
                    res = Nb.T @ (g - Gt.T @ u)
                    t = scipy.linalg.solve_triangular(Rm, res, trans="T")
                    dz = scipy.linalg.solve_triangular(Rm, t)
                    dx = dx + Nb @ dz
                    u = Gt @ dx - et
                dy = (scipy.linalg.solve_triangular(R1, Q1.T @ (Gt.T @ u - g))
                      if p else np.zeros(0))
                return dx, dy, u

            F0t = flat([w.rinv @ F0 @ w.rinv.T for w, F0 in zip(W, blk.F0)])
            dx1, dy1, u1 = newton(-F0t, -c, b)
            dZ1 = [_sym(-w.rinv.T @ uu @ w.rinv) for w, uu in zip(W, unflat(u1))]
            den = -kappa / tau - b @ dy1 + _inner(blk.F0, dZ1) + c @ dx1
            Fdx1 = blk.op(dx1)
            rst = flat([w.rinv @ r @ w.rinv.T for w, r in zip(W, rs)])

            def direction(Q, eta, rkap):
                dx0, dy0, u0 = newton(flat(Q) + eta * rst, -eta * rx, -eta * ry)
                dZ0 = [_sym(-w.rinv.T @ uu @ w.rinv) for w, uu in zip(W, unflat(u0))]
                num = (-eta * rt - rkap / tau + b @ dy0 - _inner(blk.F0, dZ0) - c @ dx0)
                dtau = num / den
                dx = dx0 + dtau * dx1
                dy = dy0 + dtau * dy1
                dZ = [a + dtau * d for a, d in zip(dZ0, dZ1)]
                dkap = (rkap - kappa * dtau) / tau
                # from the linearized primal equation; recovering dS through the
                # scaling loses accuracy once r is ill-conditioned
                Fdx = [a + dtau * d for a, d in zip(blk.op(dx0), Fdx1)]
                dS = [_sym(f + F0 * dtau - eta * r) for f, F0, r in zip(Fdx, blk.F0, rs)]
                return dx, dy, dS, dZ, dtau, dkap

            def step_len(dS, dZ, dtau, dkap):
                a = np.inf
                for w, ds, dz in zip(W, dS, dZ):
                    a = min(a, _max_step(w.Ls, ds), _max_step(w.Lz, dz))
                if dtau < 0:
                    a = min(a, -tau / dtau)
                if dkap < 0:
                    a = min(a, -kappa / dkap)
                return a

            mu = (_inner(S, Z) + tau * kappa) / (nu + 1)
            Qa = [-np.diag(w.lam) for w in W]
            aff = direction(Qa, 1.0, -tau * kappa)
            a_aff = min(1.0, step_len(*aff[2:]))
            sigma = min(1.0, max(0.0, (1.0 - a_aff) ** 3))

            Q = []
            for w, ds, dz in zip(W, aff[2], aff[3]):
                dsa = w.rinv @ ds @ w.rinv.T
                dza = w.r.T @ dz @ w.r
                R = -np.diag(w.lam ** 2) + sigma * mu * np.eye(len(w.lam)) - _jordan(dsa, dza)
                Q.append(2.0 * R / (w.lam[:, None] + w.lam[None, :]))
            rk = sigma * mu - tau * kappa - aff[4] * aff[5]
            dx, dy, dS, dZ, dtau, dkap = direction(Q, 1.0 - sigma, rk)
            alpha = min(1.0, st.step_fraction * step_len(dS, dZ, dtau, dkap))
            if not np.isfinite(alpha) or alpha < 1e-12:
                raise FloatingPointError(f"step length collapsed ({alpha:.1e})")
            x = x + alpha * dx
            y = y + alpha * dy
            S = [_sym(Sj + alpha * d) for Sj, d in zip(S, dS)]
            Z = [_sym(Zj + alpha * d) for Zj, d in zip(Z, dZ)]
            tau += alpha * dtau
            kappa += alpha * dkap
            if not all(np.all(np.isfinite(v)) for v in (x, y)):
                raise FloatingPointError("nonfinite iterate")
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            message = f"numerical breakdown at iteration {it}: {exc}"
            log.debug(message)
            break

    if status is Status.ITERATION_LIMIT and best is not None:
        m, x, y, S, Z, tau, kappa = best
        status = Status.NEAR_OPTIMAL
        message += "; returning best iterate within relaxed tolerances"

    # undo scaling
    yfull = np.zeros(nrows_full)
    if status is Status.PRIMAL_INFEASIBLE:
        den_ = b @ y - _inner(blk.F0, Z)
        xo = np.full(n, np.nan)
        yfull[keep] = y / den_
        Zo = [z / den_ for z in Z]
        obj = np.nan
    elif status is Status.DUAL_INFEASIBLE:
        xo = D * x / (-(c @ x))
        Zo = [np.zeros_like(z) for z in Z]
        obj = -np.inf
    else:
        xo = D * x / tau
        yfull[keep] = y / tau
        Zo = [z / tau for z in Z]
        obj = float(prog.c @ xo)
    sol = ConicSolution(status, xo, obj, yfull / rnorm, Zo, {}, it, history=history,
                        message=message)
    if sol.ok:
        res = kkt_residuals(prog, sol)
        sol.residuals = res
        sol.dual_objective = res["dual_objective"]
    else:
        sol.residuals = {k: history[-1][k] for k in ("pres", "dres", "gap", "pinf", "dinf")}
    log.debug("solve finished: %s after %d iterations (%s)", status, it, message)
    return sol


def _near(m, ftol, gtol) -> bool:
    scale = max(1.0, abs(m["pobj"]))
    return (m["pres"] <= ftol and m["dres"] <= ftol
            and (m["gap"] <= gtol * scale or abs(m["pobj"] - m["dobj"]) <= gtol * scale))


def _merit(m) -> float:
    return max(m["pres"], m["dres"], m["gap"] / max(1.0, abs(m["pobj"])))
