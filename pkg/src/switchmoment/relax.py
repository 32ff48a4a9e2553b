"""Moment relaxation of the occupation-measure LP.

Unknowns are truncated moment vectors of

* ``mu_1 .. mu_m`` -- per-mode occupation measures on ``[0, 1] x X``,
* ``mu_T``         -- the terminal measure on ``[0, 1] x X_T``,
* ``mu_0``         -- the initial measure on ``X_0``, only when ``X_0`` is not a
  single point (a point mass is substituted in closed form otherwise).

Each vector holds all moments up to degree ``2d`` in the graded-lex basis of
:mod:`switchmoment.poly`.  The program is

    minimize    sum_k L_k(l_k)
    subject to  L_T(v) - L_0(v(0, .)) = sum_k L_k(dv/ds + grad v . f_k)   (dynamics)
                sum_k L_k(s^a) = L_T(s^(a+1)) / (a+1),  a < 2d           (time marginal)
                moment and localizing matrices PSD, support equalities = 0.

The builder expects a time-scaled problem (see :func:`problem.scale_time`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import ceil

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .poly import Polynomial, basis_index, basis_size, lie_derivative, monomial_basis
from .problem import FixedHorizon, SwitchedProblem, scale_state, scale_time, state_bounds

log = logging.getLogger(__name__)

PROGRAM_SCHEMA = "switchmoment.conic/1"
MAX_ORDER = 8


class RelaxationOrderError(ValueError):
    """Relaxation order below the minimum the problem data requires."""


@dataclass(frozen=True)
class MeasureSpec:
    label: str
    nvars: int                       # 1 + n for time-state measures, n for mu_0
    degree: int                      # 2d
    inequalities: tuple[Polynomial, ...]
    equalities: tuple[Polynomial, ...]

    @property
    def size(self) -> int:
        return basis_size(self.nvars, self.degree)

    def pinned(self) -> dict[int, float]:
        """Variables fixed by a univariate linear support equality ``a v_i + b = 0``."""
        out: dict[int, float] = {}
        for h in self.equalities:
            if h.nvars != self.nvars:
                h = _drop_time(h)
            if h.degree != 1:
                continue
            lin = [(e, c) for e, c in h.terms.items() if sum(e) == 1]
            if len(lin) == 1 and len(h.terms) <= 2:
                e, a = lin[0]
                out[e.index(1)] = -h.coefficient((0,) * self.nvars) / a
        return out


@dataclass(frozen=True)
class MeasureLayout:
    """Placement of each unknown measure's moments in the global vector."""

    measures: tuple[MeasureSpec, ...]
    offsets: tuple[int, ...]
    initial_point: tuple[float, ...] | None
    order: int
    n: int
    m: int
    time_scale: float

    @property
    def num_vars(self) -> int:
        last = self.measures[-1]
        return self.offsets[-1] + last.size

    def index(self, label: str) -> int:
        for i, ms in enumerate(self.measures):
            if ms.label == label:
                return i
        raise KeyError(label)

    def block(self, y: np.ndarray, label: str) -> np.ndarray:
        """Slice of ``y`` holding the moments of measure ``label``."""
        i = self.index(label)
        return y[self.offsets[i]:self.offsets[i] + self.measures[i].size]

    def moment(self, y: np.ndarray, label: str, exponents) -> float:
        i = self.index(label)
        ms = self.measures[i]
        return float(y[self.offsets[i] + basis_index(ms.nvars, ms.degree)[tuple(exponents)]])

    def functional(self, label: str, q: Polynomial) -> dict[int, float]:
        """Sparse row representing ``L_label(q)`` on the global moment vector."""
        i = self.index(label)
        ms = self.measures[i]
        idx = basis_index(ms.nvars, ms.degree)
        row: dict[int, float] = {}
        for e, c in q.terms.items():
            if q.nvars != ms.nvars:
                # mu_0 lives on x only: drop the (zero) time exponent
                if e[0] != 0:
                    continue
                e = e[1:]
            if sum(e) > ms.degree:
                raise RelaxationOrderError(
                    f"monomial {e} exceeds degree {ms.degree} of {label}")
            j = self.offsets[i] + idx[e]
            row[j] = row.get(j, 0.0) + c
        return row


@dataclass
class PsdBlock:
    """Affine matrix map ``y -> const + sum_i y[var_idx[i]] * coeffs[i]``."""

    label: str
    size: int
    var_idx: np.ndarray
    coeffs: np.ndarray               # (len(var_idx), size, size), symmetric slices
    const: np.ndarray                # (size, size)

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        return self.const + np.tensordot(y[self.var_idx], self.coeffs, axes=1)


@dataclass
class ConicProgram:
    """``min c'y  s.t.  A y = b,  every PSD block of y is positive semidefinite``."""

    num_vars: int
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    blocks: list[PsdBlock]
    metadata: dict = field(default_factory=dict)
    layout: MeasureLayout | None = None

    def objective(self, y: np.ndarray) -> float:
        return float(self.c @ y) + self.metadata.get("objective_offset", 0.0)


# --- sizes ---------------------------------------------------------------


def min_order(p: SwitchedProblem) -> int:
    """Smallest admissible relaxation order for ``p``."""
    return max([1] + [ceil(q.degree / 2) for q in p.all_polynomials()])


def count_variables(p: SwitchedProblem, d: int) -> int:
    """Number of scalar moment unknowns at order ``d``.

    ``(m + 1) * C(n + 1 + 2d, n + 1)`` for the occupation and terminal
    measures, plus ``C(n + 2d, n)`` when the initial set is not a point.
    """
    dmin = min_order(p)
    if d < dmin:
        raise RelaxationOrderError(f"order {d} below minimum {dmin} for this problem")
    count = (p.m + 1) * basis_size(p.n + 1, 2 * d)
    if p.initial_set.singleton() is None:
        count += basis_size(p.n, 2 * d)
    return count


def make_layout(p: SwitchedProblem, d: int) -> MeasureLayout:
    nv = p.n + 1
    s = Polynomial.variable(0, nv)
    time_support = s * (1.0 - s)
    specs = [MeasureSpec(f"mu_{k}", nv, 2 * d,
                         (time_support,) + p.state_set.inequalities,
                         p.state_set.equalities)
             for k in range(1, p.m + 1)]
    t_eq = () if p.is_free else (s - 1.0,)
    specs.append(MeasureSpec("mu_T", nv, 2 * d,
                             (time_support,) + p.terminal_set.inequalities,
                             t_eq + p.terminal_set.equalities))
    x0 = p.initial_set.singleton()
    if x0 is None:
        drop = [_drop_time(g) for g in p.initial_set.inequalities]
        eqs = [_drop_time(h) for h in p.initial_set.equalities]
        specs.append(MeasureSpec("mu_0", p.n, 2 * d, tuple(drop), tuple(eqs)))
    offsets = np.cumsum([0] + [ms.size for ms in specs[:-1]])
    return MeasureLayout(tuple(specs), tuple(int(o) for o in offsets), x0, d,
                         p.n, p.m, p.time_scale)


def _drop_time(q: Polynomial) -> Polynomial:
    return Polynomial({e[1:]: c for e, c in q.terms.items()}, q.nvars - 1)


# --- matrices ------------------------------------------------------------


def _localizing_block(layout: MeasureLayout, mi: int, g: Polynomial | None,
                      label: str, reduce_pinned: bool = True) -> PsdBlock | None:
    ms = layout.measures[mi]
    nv = ms.nvars
    if g is not None and g.nvars != nv:
        g = _drop_time(g)
    half = ms.degree // 2 - (0 if g is None else ceil(g.degree / 2))
    basis = monomial_basis(nv, half)
    if reduce_pinned:
        # Moments involving a pinned variable are fixed by the support
        # equality rows, and the full matrix is a congruence of the one on the
        # reduced basis; dropping the pinned directions restores an interior.
        pins = ms.pinned()
        basis = [e for e in basis if all(e[v] == 0 for v in pins)]
        if g is not None:
            for v, val in pins.items():
                g = g.fix_variable(v, val)
            if g.degree == 0:
                if g.coefficient((0,) * nv) >= 0:
                    return None
                basis = basis[:1]
    idx = basis_index(nv, ms.degree)
    gterms = [((0,) * nv, 1.0)] if g is None else list(g.terms.items())
    size = len(basis)
    entries: dict[int, np.ndarray] = {}
    for i, bi in enumerate(basis):
        for j in range(i, size):
            bj = basis[j]
            for e, c in gterms:
                mono = tuple(a + b + k for a, b, k in zip(bi, bj, e))
                var = layout.offsets[mi] + idx[mono]
                mat = entries.setdefault(var, np.zeros((size, size)))
                mat[i, j] += c
                if i != j:
                    mat[j, i] += c
    var_idx = np.array(sorted(entries), dtype=int)
    coeffs = np.array([entries[v] for v in var_idx])
    return PsdBlock(label, size, var_idx, coeffs, np.zeros((size, size)))


class _Rows:
    def __init__(self):
        self.rows: list[dict[int, float]] = []
        self.rhs: list[float] = []
        self.kinds: list[str] = []

    def add(self, row: dict[int, float], rhs: float, kind: str) -> None:
        row = {j: v for j, v in row.items() if v != 0.0}
        if not row and abs(rhs) == 0.0:
            return
        self.rows.append(row)
        self.rhs.append(rhs)
        self.kinds.append(kind)


def _merge(*rows_and_signs) -> dict[int, float]:
    out: dict[int, float] = {}
    for row, sign in rows_and_signs:
        for j, v in row.items():
            out[j] = out.get(j, 0.0) + sign * v
    return out


def reduce_rows(A: np.ndarray, b: np.ndarray, tol: float = 1e-10):
    """Drop linearly dependent equality rows (pivoted QR on ``A'``).

    Returns ``(keep, inconsistent)`` where ``keep`` indexes retained rows.
    Dependent rows whose right-hand side disagrees with the retained ones are
    kept as well, so that the solver can certify infeasibility.
    """
    if A.shape[0] == 0:
        return np.arange(0), False
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(diag[0], 1e-300)))
    keep = np.sort(piv[:rank])
    dropped = np.sort(piv[rank:])
    inconsistent = False
    if dropped.size:
        Ak, bk = A[keep], b[keep]
        coef, *_ = np.linalg.lstsq(Ak.T, A[dropped].T, rcond=None)
        mismatch = np.abs(coef.T @ bk - b[dropped])
        scale = 1.0 + np.abs(b[dropped])
        bad = dropped[mismatch > 1e-8 * scale]
        if bad.size:
            inconsistent = True
            keep = np.sort(np.concatenate([keep, bad]))
    return keep, inconsistent


def state_normalization(p: SwitchedProblem) -> tuple[np.ndarray, np.ndarray]:
    """Offset and scale mapping the state-set bounding box onto ``[-1, 1]^n``."""
    offset = np.zeros(p.n)
    scale = np.ones(p.n)
    for i, bd in enumerate(state_bounds(p.state_set)):
        if bd is not None and bd[1] > bd[0]:
            offset[i] = 0.5 * (bd[0] + bd[1])
            scale[i] = 0.5 * (bd[1] - bd[0])
    return offset, scale


def build_relaxation(p: SwitchedProblem, d: int, scaled: bool | None = None,
                     reduce_pinned: bool = True,
                     normalize_state: bool = True) -> ConicProgram:
    """Compile ``p`` at relaxation order ``d`` into a :class:`ConicProgram`.

    ``p`` is time-scaled first unless it already lives on ``[0, 1]``
    (``scaled=True`` forces skipping the rescale).  With ``reduce_pinned``
    the PSD blocks of a measure whose support fixes a variable (a point
    terminal set, or ``s = 1`` for a fixed horizon) are written on the basis
    without that variable; the feasible set is unchanged.  With
    ``normalize_state`` the state is first mapped affinely so the bounding box
    of ``X`` becomes ``[-1, 1]^n`` (metadata ``state_offset``/``state_scale``);
    objective, masses and time moments are invariant under this map.
    """
    if d > MAX_ORDER:
        log.warning("order %d above the supported range (<= %d)", d, MAX_ORDER)
    count = count_variables(p, d)
    digest = p.digest()
    offset, scale = np.zeros(p.n), np.ones(p.n)
    if normalize_state:
        offset, scale = state_normalization(p)
        if np.any(offset != 0.0) or np.any(scale != 1.0):
            p = scale_state(p, offset, scale)
    if scaled is None:
        scaled = p.horizon_length == 1.0
    if not scaled:
        p = scale_time(p)
    layout = make_layout(p, d)
    assert layout.num_vars == count
    nv = p.n + 1
    labels_k = [f"mu_{k}" for k in range(1, p.m + 1)]
    rows = _Rows()

    # dynamics: weak form of dx = sum_k f_k u_k dt against test monomials
    deg_f = max([1] + [f.degree for md in p.modes for f in md.field])
    vdeg = 2 * d + 1 - deg_f
    for e in monomial_basis(nv, max(vdeg, 0)):
        v = Polynomial.monomial(e)
        parts = [(layout.functional("mu_T", v), 1.0)]
        for lab, md in zip(labels_k, p.modes):
            parts.append((layout.functional(lab, lie_derivative(v, md.field)), -1.0))
        v0 = v.scale_variable(0, 0.0)  # v(0, x)
        if layout.initial_point is not None:
            rhs = v0((0.0, *layout.initial_point))
        else:
            parts.append((layout.functional("mu_0", v0), -1.0))
            rhs = 0.0
        rows.add(_merge(*parts), rhs, "dynamics")
    if layout.initial_point is None:
        rows.add(layout.functional("mu_0", Polynomial.constant(1.0, nv)), 1.0, "mass")

    # time marginal of sum_k mu_k is Lebesgue up to the terminal time
    s = Polynomial.variable(0, nv)
    for a in range(2 * d):
        parts = [(layout.functional(lab, s ** a), 1.0) for lab in labels_k]
        parts.append((layout.functional("mu_T", (s ** (a + 1)) * (1.0 / (a + 1))), -1.0))
        rows.add(_merge(*parts), 0.0, "marginal")

    # support equalities: L(h * x^beta) = 0 for deg(beta) <= 2d - deg(h)
    blocks: list[PsdBlock] = []
    for mi, ms in enumerate(layout.measures):
        for h in ms.equalities:
            hh = h if h.nvars == ms.nvars else _drop_time(h)
            for e in monomial_basis(ms.nvars, ms.degree - hh.degree):
                rows.add(layout.functional(ms.label, hh * Polynomial.monomial(e)),
                         0.0, f"support_eq:{ms.label}")
        blocks.append(_localizing_block(layout, mi, None, f"moment:{ms.label}",
                                        reduce_pinned))
        for gi, g in enumerate(ms.inequalities):
            blk = _localizing_block(layout, mi, g, f"localizing:{ms.label}:{gi}",
                                    reduce_pinned)
            if blk is not None:
                blocks.append(blk)

    # objective
    c = np.zeros(count)
    for lab, md in zip(labels_k, p.modes):
        for j, v in layout.functional(lab, md.lagrangian).items():
            c[j] += v

    A = np.zeros((len(rows.rows), count))
    for r, row in enumerate(rows.rows):
        for j, v in row.items():
            A[r, j] = v
    b = np.array(rows.rhs)
    keep, inconsistent = reduce_rows(A, b)
    dropped = len(rows.rows) - len(keep)
    if dropped:
        log.info("order %d: dropped %d dependent equality rows", d, dropped)
    if inconsistent:
        log.warning("order %d: equality constraints are inconsistent", d)
    kinds = [rows.kinds[i] for i in keep]
    meta = {
        "order": d,
        "labels": [ms.label for ms in layout.measures],
        "problem_hash": digest,
        "time_scale": p.time_scale,
        "state_offset": offset.tolist(),
        "state_scale": scale.tolist(),
        "rows_total": len(rows.rows),
        "rows_dropped": dropped,
        "row_kinds": kinds,
        "row_kinds_built": list(rows.kinds),
        "inconsistent": inconsistent,
    }
    return ConicProgram(count, c, sp.csr_matrix(A[keep]), b[keep], blocks, meta, layout)


# --- text format ---------------------------------------------------------


def write_program(prog: ConicProgram, fh) -> None:
    """Write ``prog`` in the sparse text format read by :func:`read_program`.

    Layout (one record per line, whitespace separated)::

        switchmoment.conic/1
        vars N
        objective K            then K lines:  index value
        equalities P K         then K lines:  row col value
        rhs                    then P lines:  value
        blocks B
        block SIZE K LABEL     then K lines:  i j var value   (i <= j, var -1 = constant)
    """
    g = "%.17g"
    fh.write(PROGRAM_SCHEMA + "\n")
    fh.write(f"vars {prog.num_vars}\n")
    nz = np.flatnonzero(prog.c)
    fh.write(f"objective {nz.size}\n")
    for i in nz:
        fh.write(f"{i} {g % prog.c[i]}\n")
    A = prog.A.tocoo()
    fh.write(f"equalities {A.shape[0]} {A.nnz}\n")
    for r, col, v in zip(A.row, A.col, A.data):
        fh.write(f"{r} {col} {g % v}\n")
    fh.write("rhs\n")
    for v in prog.b:
        fh.write(g % v + "\n")
    fh.write(f"blocks {len(prog.blocks)}\n")
    for blk in prog.blocks:
        recs = []
        iu, ju = np.triu_indices(blk.size)
        for i, j in zip(iu, ju):
            if blk.const[i, j] != 0.0:
                recs.append(f"{i} {j} -1 {g % blk.const[i, j]}")
            for k, var in enumerate(blk.var_idx):
                v = blk.coeffs[k, i, j]
                if v != 0.0:
                    recs.append(f"{i} {j} {var} {g % v}")
        fh.write(f"block {blk.size} {len(recs)} {blk.label}\n")
        for rec in recs:
            fh.write(rec + "\n")


def read_program(fh) -> ConicProgram:
    lines = iter(fh.read().splitlines())
    head = next(lines).strip()
    if head != PROGRAM_SCHEMA:
        raise ValueError(f"unsupported program schema {head!r}")
    n = int(next(lines).split()[1])
    k = int(next(lines).split()[1])
    c = np.zeros(n)
    for _ in range(k):
        i, v = next(lines).split()
        c[int(i)] = float(v)
    _, p_, nnz = next(lines).split()
    rr, cc, vv = [], [], []
    for _ in range(int(nnz)):
        r, col, v = next(lines).split()
        rr.append(int(r)); cc.append(int(col)); vv.append(float(v))
    A = sp.csr_matrix((vv, (rr, cc)), shape=(int(p_), n))
    next(lines)  # rhs
    b = np.array([float(next(lines)) for _ in range(int(p_))])
    nblk = int(next(lines).split()[1])
    blocks = []
    for _ in range(nblk):
        _, size, cnt, label = next(lines).split(maxsplit=3)
        size = int(size)
        const = np.zeros((size, size))
        entries: dict[int, np.ndarray] = {}
        for _ in range(int(cnt)):
            i, j, var, v = next(lines).split()
            i, j, var, v = int(i), int(j), int(var), float(v)
            mat = const if var < 0 else entries.setdefault(var, np.zeros((size, size)))
            mat[i, j] = v
            mat[j, i] = v
        var_idx = np.array(sorted(entries), dtype=int)
        coeffs = (np.array([entries[v] for v in var_idx]) if entries
                  else np.zeros((0, size, size)))
        blocks.append(PsdBlock(label, size, var_idx, coeffs, const))
    return ConicProgram(n, c, A, b, blocks, {})
