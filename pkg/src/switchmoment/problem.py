"""Switched optimal control instances, their file format, and built-in examples.

A problem has ``m`` modes, each a polynomial vector field ``f_k(t, x)`` with a
polynomial running cost ``l_k(t, x)``, a state constraint set ``X`` and initial
and terminal sets, and a horizon that is either fixed (``T``) or free with an
upper bound ``t_max``.  All polynomials live in the variables ``(t, x_1..x_n)``;
set descriptions must not depend on time.

File format
-----------
Problems are stored as JSON documents::

    {
      "schema": "switchmoment.problem/1",
      "n": 1,
      "m": 2,
      "horizon": {"fixed": 1.0},            # or {"free": 5.0}
      "modes": [
        {"field": [[[[0, 1], -1.0]]],       # one term list per state component
         "lagrangian": [[[0, 2], 1.0]]},
        ...
      ],
      "state_set":    {"inequalities": [terms, ...], "equalities": [terms, ...]},
      "initial_set":  {...},
      "terminal_set": {...}
    }

A term list is a list of ``[exponents, coefficient]`` pairs where ``exponents``
has length ``n + 1`` with the time exponent first.  ``g >= 0`` for each
inequality and ``h = 0`` for each equality.  An optional ``"time_scale"`` key
records a horizon rescaling already applied by :func:`scale_time`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

from .poly import Polynomial

SCHEMA = "switchmoment.problem/1"


class ProblemError(ValueError):
    """Semantically invalid problem data."""


class ProblemSyntaxError(ProblemError):
    """Malformed problem text; carries the offending position."""

    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"{msg} (line {line}, column {column})")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class FixedHorizon:
    T: float


@dataclass(frozen=True)
class FreeHorizon:
    t_max: float


Horizon = FixedHorizon | FreeHorizon


@dataclass(frozen=True)
class SemialgebraicSet:
    """``{x : g_i(x) >= 0, h_j(x) = 0}`` with polynomials in (t, x), time-free."""

    n: int
    inequalities: tuple[Polynomial, ...] = ()
    equalities: tuple[Polynomial, ...] = ()

    @classmethod
    def point(cls, coords: Sequence[float]) -> SemialgebraicSet:
        n = len(coords)
        eqs = tuple(Polynomial.variable(i + 1, n + 1) - float(c)
                    for i, c in enumerate(coords))
        return cls(n, (), eqs)

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float],
            extra: Sequence[Polynomial] = ()) -> SemialgebraicSet:
        """Box as quadratic constraints ``(u_i - x_i)(x_i - l_i) >= 0``."""
        n = len(lower)
        ineqs = list(extra)
        for i, (lo, hi) in enumerate(zip(lower, upper)):
            xi = Polynomial.variable(i + 1, n + 1)
            ineqs.append((float(hi) - xi) * (xi - float(lo)))
        return cls(n, tuple(ineqs), ())

    @property
    def polynomials(self) -> tuple[Polynomial, ...]:
        return self.inequalities + self.equalities

    def singleton(self) -> tuple[float, ...] | None:
        """The point if this set is ``{x : x_i - c_i = 0 for all i}``, else None."""
        if self.inequalities or len(self.equalities) != self.n:
            return None
        coords: dict[int, float] = {}
        for h in self.equalities:
            if h.degree != 1:
                return None
            lin = [(e, c) for e, c in h.terms.items() if sum(e) == 1]
            if len(lin) != 1 or lin[0][0][0] != 0:
                return None
            e, a = lin[0]
            i = e.index(1) - 1
            coords[i] = -h.coefficient((0,) * (self.n + 1)) / a
        if sorted(coords) != list(range(self.n)):
            return None
        return tuple(coords[i] for i in range(self.n))

    def residual(self, x: Sequence[float]) -> float:
        """Largest constraint violation at state ``x`` (<= 0 means inside)."""
        pt = (0.0, *x)
        vals = [-g(pt) for g in self.inequalities] + [abs(h(pt)) for h in self.equalities]
        return max(vals, default=0.0)


@dataclass(frozen=True)
class Mode:
    field: tuple[Polynomial, ...]
    lagrangian: Polynomial

    @property
    def nvars(self) -> int:
        return self.lagrangian.nvars


@dataclass(frozen=True)
class SwitchedProblem:
    modes: tuple[Mode, ...]
    state_set: SemialgebraicSet
    initial_set: SemialgebraicSet
    terminal_set: SemialgebraicSet
    horizon: Horizon
    time_scale: float = 1.0
    name: str = field(default="", compare=False)

    @property
    def n(self) -> int:
        return self.state_set.n

    @property
    def m(self) -> int:
        return len(self.modes)

    @property
    def horizon_length(self) -> float:
        """``T`` for a fixed horizon, ``t_max`` for a free one."""
        h = self.horizon
        return h.T if isinstance(h, FixedHorizon) else h.t_max

    @property
    def is_free(self) -> bool:
        return isinstance(self.horizon, FreeHorizon)

    def all_polynomials(self) -> list[Polynomial]:
        polys: list[Polynomial] = []
        for md in self.modes:
            polys.extend(md.field)
            polys.append(md.lagrangian)
        for s in (self.state_set, self.initial_set, self.terminal_set):
            polys.extend(s.polynomials)
        return polys

    def digest(self) -> str:
        return hashlib.sha256(serialize_problem(self).encode()).hexdigest()[:16]


def _guarded_variables(s: SemialgebraicSet) -> set[int]:
    # variables bounded by a negative square term, a two-sided pair of linear
    # univariate bounds, or an equality
    guarded: set[int] = set()
    lower: set[int] = set()
    upper: set[int] = set()
    for g in s.inequalities:
        for e, c in g.terms.items():
            if c < 0 and sum(e) == 2 and max(e) == 2:
                guarded.add(e.index(2) - 1)
        if g.degree == 1:
            vars_ = {i for e in g.terms for i, a in enumerate(e) if a}
            if len(vars_) == 1:
                i = vars_.pop()
                e = tuple(1 if j == i else 0 for j in range(s.n + 1))
                (lower if g.coefficient(e) > 0 else upper).add(i - 1)
    guarded |= lower & upper
    for h in s.equalities:
        guarded |= {i - 1 for e in h.terms for i, a in enumerate(e) if a and i > 0}
    return guarded


def validate(p: SwitchedProblem) -> SwitchedProblem:
    """Check structural invariants; return ``p`` unchanged or raise ProblemError."""
    if p.m < 1:
        raise ProblemError("problem needs at least one mode")
    if p.n < 1:
        raise ProblemError("state dimension must be positive")
    nv = p.n + 1
    for k, md in enumerate(p.modes, 1):
        if len(md.field) != p.n:
            raise ProblemError(
                f"dimension mismatch: mode {k} field has {len(md.field)} "
                f"components, expected {p.n}")
        for q in (*md.field, md.lagrangian):
            if q.nvars != nv:
                raise ProblemError(
                    f"dimension mismatch: mode {k} polynomial has {q.nvars} "
                    f"variables, expected {nv}")
    for label, s in (("state_set", p.state_set), ("initial_set", p.initial_set),
                     ("terminal_set", p.terminal_set)):
        if s.n != p.n:
            raise ProblemError(f"{label} has dimension {s.n}, expected {p.n}")
        for q in s.polynomials:
            if q.nvars != nv:
                raise ProblemError(f"dimension mismatch in {label}")
            if q.uses_time():
                raise ProblemError(f"{label} constraint depends on time")
    if p.horizon_length <= 0:
        raise ProblemError("horizon must be positive")
    missing = set(range(p.n)) - _guarded_variables(p.state_set)
    if missing:
        raise ProblemError(
            "state set lacks a ball or box constraint on x_"
            + ", x_".join(str(i + 1) for i in sorted(missing))
            + " (compactness guard)")
    return p


def scale_time(p: SwitchedProblem) -> SwitchedProblem:
    """Rescale time to ``s = t / T_h`` on ``[0, 1]``.

    Fields and Lagrangians are multiplied by ``T_h`` (and ``t`` replaced by
    ``T_h s``), so costs are unchanged and the scaled problem's costs are
    directly comparable with the original ones.  ``time_scale`` accumulates
    ``T_h`` so reported times can be mapped back.
    """
    th = p.horizon_length

    def sc(q: Polynomial) -> Polynomial:
        return q.scale_variable(0, th) * th

    modes = tuple(Mode(tuple(sc(f) for f in md.field), sc(md.lagrangian))
                  for md in p.modes)
    horizon = FreeHorizon(1.0) if p.is_free else FixedHorizon(1.0)
    return replace(p, modes=modes, horizon=horizon, time_scale=p.time_scale * th)


def state_bounds(s: SemialgebraicSet) -> list[tuple[float, float] | None]:
    """Per-variable intervals implied by univariate quadratic or ball constraints.

    Recognizes ``a x_i^2 + b x_i + c >= 0`` with ``a < 0`` and
    ``r^2 - sum_i x_i^2 >= 0``; other variables map to None.
    """
    out: list[tuple[float, float] | None] = [None] * s.n
    nv = s.n + 1

    def tighten(i: int, lo: float, hi: float) -> None:
        cur = out[i]
        out[i] = (lo, hi) if cur is None else (max(cur[0], lo), min(cur[1], hi))

    for g in s.inequalities:
        if g.degree != 2:
            continue
        used = sorted({i for e in g.terms for i, a in enumerate(e) if a})
        if len(used) == 1:
            i = used[0]
            unit = [0] * nv
            unit[i] = 2
            a = g.coefficient(unit)
            unit[i] = 1
            b = g.coefficient(unit)
            c = g.coefficient((0,) * nv)
            disc = b * b - 4 * a * c
            if a < 0 and disc >= 0:
                r1 = (-b + disc ** 0.5) / (2 * a)
                r2 = (-b - disc ** 0.5) / (2 * a)
                tighten(i - 1, min(r1, r2), max(r1, r2))
            continue
        # centered ball r^2 - sum x_i^2
        c = g.coefficient((0,) * nv)
        quad = [e for e in g.terms if sum(e) == 2]
        if (c > 0 and len(g.terms) == len(quad) + 1
                and all(max(e) == 2 and g.terms[e] == -1.0 for e in quad)):
            r = c ** 0.5
            for e in quad:
                tighten(e.index(2) - 1, -r, r)
    return out


def scale_state(p: SwitchedProblem, offset: Sequence[float],
                scale: Sequence[float]) -> SwitchedProblem:
    """Change variables ``x_i = offset_i + scale_i z_i``; costs are unchanged."""
    if len(offset) != p.n or len(scale) != p.n:
        raise ProblemError("offset/scale length must equal the state dimension")
    if any(sc <= 0 for sc in scale):
        raise ProblemError("state scale factors must be positive")

    def sub(q: Polynomial) -> Polynomial:
        for i, (o, sc) in enumerate(zip(offset, scale)):
            if o != 0.0 or sc != 1.0:
                q = q.affine_substitute(i + 1, o, sc)
        return q

    def sub_set(st: SemialgebraicSet) -> SemialgebraicSet:
        return SemialgebraicSet(st.n, tuple(sub(g) for g in st.inequalities),
                                tuple(sub(h) for h in st.equalities))

    modes = tuple(Mode(tuple(sub(f) * (1.0 / sc) for f, sc in zip(md.field, scale)),
                       sub(md.lagrangian)) for md in p.modes)
    return replace(p, modes=modes, state_set=sub_set(p.state_set),
                   initial_set=sub_set(p.initial_set),
                   terminal_set=sub_set(p.terminal_set))


# --- serialization -------------------------------------------------------


def _terms_out(q: Polynomial) -> list:
    return [[list(e), c] for e, c in q.sorted_terms()]


def _set_out(s: SemialgebraicSet) -> dict:
    return {"inequalities": [_terms_out(g) for g in s.inequalities],
            "equalities": [_terms_out(h) for h in s.equalities]}


def serialize_problem(p: SwitchedProblem) -> str:
    doc = {
        "schema": SCHEMA,
        "n": p.n,
        "m": p.m,
        "horizon": ({"free": p.horizon.t_max} if p.is_free
                    else {"fixed": p.horizon.T}),
        "modes": [{"field": [_terms_out(f) for f in md.field],
                   "lagrangian": _terms_out(md.lagrangian)} for md in p.modes],
        "state_set": _set_out(p.state_set),
        "initial_set": _set_out(p.initial_set),
        "terminal_set": _set_out(p.terminal_set),
    }
    if p.time_scale != 1.0:
        doc["time_scale"] = p.time_scale
    return json.dumps(doc, indent=1) + "\n"


def _poly_in(terms, nvars: int, where: str) -> Polynomial:
    if not isinstance(terms, list):
        raise ProblemError(f"{where}: expected a list of [exponents, coefficient]")
    try:
        return Polynomial([(e, c) for e, c in terms], nvars)
    except (TypeError, ValueError) as exc:
        raise ProblemError(f"{where}: {exc}") from None


def _set_in(doc, n: int, where: str) -> SemialgebraicSet:
    if not isinstance(doc, dict):
        raise ProblemError(f"{where}: expected an object")
    ineq = tuple(_poly_in(t, n + 1, f"{where}.inequalities[{i}]")
                 for i, t in enumerate(doc.get("inequalities", [])))
    eq = tuple(_poly_in(t, n + 1, f"{where}.equalities[{i}]")
               for i, t in enumerate(doc.get("equalities", [])))
    return SemialgebraicSet(n, ineq, eq)


def parse_problem(text: str) -> SwitchedProblem:
    """Parse and validate a problem document (see module docstring)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ProblemSyntaxError("top level must be an object", 1, 1)
    schema = doc.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise ProblemError(f"unsupported schema {schema!r}")
    try:
        n = int(doc["n"])
        m = int(doc["m"])
        hz = doc["horizon"]
        modes_doc = doc["modes"]
    except KeyError as exc:
        raise ProblemError(f"missing key {exc}") from None
    if n < 1:
        raise ProblemError("n must be positive")
    if "fixed" in hz:
        horizon: Horizon = FixedHorizon(float(hz["fixed"]))
    elif "free" in hz:
        horizon = FreeHorizon(float(hz["free"]))
    else:
        raise ProblemError("horizon must have a 'fixed' or 'free' entry")
    if len(modes_doc) != m:
        raise ProblemError(f"m = {m} but {len(modes_doc)} modes given")
    modes = []
    for k, md in enumerate(modes_doc, 1):
        fld = tuple(_poly_in(t, n + 1, f"modes[{k}].field[{i}]")
                    for i, t in enumerate(md.get("field", [])))
        lag = _poly_in(md.get("lagrangian", []), n + 1, f"modes[{k}].lagrangian")
        modes.append(Mode(fld, lag))
    empty = {"inequalities": [], "equalities": []}
    p = SwitchedProblem(
        modes=tuple(modes),
        state_set=_set_in(doc.get("state_set", empty), n, "state_set"),
        initial_set=_set_in(doc.get("initial_set", empty), n, "initial_set"),
        terminal_set=_set_in(doc.get("terminal_set", empty), n, "terminal_set"),
        horizon=horizon,
        time_scale=float(doc.get("time_scale", 1.0)),
    )
    return validate(p)


def load_problem(path) -> SwitchedProblem:
    with open(path) as fh:
        p = parse_problem(fh.read())
    return replace(p, name=str(path))


# --- built-in examples ---------------------------------------------------


def _linear_field(a, n: int) -> tuple[Polynomial, ...]:
    x = [Polynomial.variable(i + 1, n + 1) for i in range(n)]
    return tuple(sum((float(a[i][j]) * x[j] for j in range(n)),
                     Polynomial.constant(0.0, n + 1)) for i in range(n))


def _ex1(**kw) -> SwitchedProblem:
    x = Polynomial.variable(1, 2)
    unit = SemialgebraicSet(1, (1.0 - x * x,))
    if kw.get("linear", False):
        # dx/dt = a_k x as literally written; cannot reach x = 0 in finite time
        fields = [a * x for a in (-1.0, 1.0)]
    else:
        # dx/dt = a_k: the dynamics behind the 1/24 optimum and the tabulated bounds
        fields = [Polynomial.constant(a, 2) for a in (-1.0, 1.0)]
    modes = tuple(Mode((f,), x * x) for f in fields)
    return SwitchedProblem(modes, unit, SemialgebraicSet.point([0.5]), unit,
                           FixedHorizon(float(kw.get("T", 1.0))), name="ex1")


def _ex2(**kw) -> SwitchedProblem:
    x2 = Polynomial.variable(2, 3)
    one = Polynomial.constant(1.0, 3)
    modes = (Mode((x2, -one), one), Mode((x2, one), one))
    # only x2 >= -1 is part of the original statement; the box is a non-binding
    # compactness completion around the optimal trajectory
    X = SemialgebraicSet.box([-2.0, -2.0], [3.0, 2.0], extra=[x2 + 1.0])
    x0 = kw.get("initial_state", (1.0, 1.0))
    return SwitchedProblem(modes, X, SemialgebraicSet.point(x0),
                           SemialgebraicSet.point([0.0, 0.0]),
                           FreeHorizon(float(kw.get("t_max", 5.0))), name="ex2")


def _ex3(**kw) -> SwitchedProblem:
    x1, x2 = Polynomial.variable(1, 3), Polynomial.variable(2, 3)
    cost = x1 * x1 + x2 * x2
    modes = (Mode(_linear_field([[-1, 2], [1, -3]], 2), cost),
             Mode(_linear_field([[-2, -2], [1, -1]], 2), cost))
    X = SemialgebraicSet.box([-1.5, -1.5], [1.5, 1.5])
    XT = SemialgebraicSet(2, (1e-6 - cost,))
    x0 = kw.get("initial_state", (0.0, -1.0))
    return SwitchedProblem(modes, X, SemialgebraicSet.point(x0), XT,
                           FreeHorizon(float(kw.get("t_max", 6.0))), name="ex3")


_BUILTINS = {"ex1": _ex1, "ex2": _ex2, "ex3": _ex3}


def builtin_example(name: str, **overrides) -> SwitchedProblem:
    """Return one of the built-in instances ``"ex1"``, ``"ex2"``, ``"ex3"``.

    Keyword overrides: ``T`` and ``linear`` (ex1), ``t_max`` and
    ``initial_state`` (ex2, ex3).  ``ex1`` uses the constant fields
    ``dx/dt = -1`` and ``dx/dt = +1``; ``linear=True`` gives ``dx/dt = -x, +x``.
    ``builtin_example("ex3", initial_state=(-1, 0))`` gives the alternative
    starting point of the third example.
    """
    try:
        make = _BUILTINS[name]
    except KeyError:
        raise ProblemError(
            f"unknown example {name!r}; choose from {sorted(_BUILTINS)}") from None
    return validate(make(**overrides))


def builtin_names() -> list[str]:
    return sorted(_BUILTINS)
