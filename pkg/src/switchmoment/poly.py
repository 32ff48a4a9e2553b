"""Dense multivariate polynomials over (t, x_1, ..., x_n).

Variable 0 is always time.  Monomials are exponent tuples and are enumerated
in graded lexicographic order (total degree first, then larger powers of the
earlier variables first), e.g. for two variables::

    (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...

This order is frozen: moment-vector layouts and serialized programs rely on it.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np

Exponent = tuple[int, ...]

MAX_BASIS_SIZE = 10_000_000


class CapacityError(OverflowError):
    """Requested monomial basis is too large to index."""


def _compositions(total: int, nvars: int):
    # all exponent tuples of exact degree `total`, lex-descending
    if nvars == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, nvars - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def _basis(nvars: int, max_degree: int) -> tuple[Exponent, ...]:
    out: list[Exponent] = []
    for deg in range(max_degree + 1):
        out.extend(_compositions(deg, nvars))
    return tuple(out)


def basis_size(nvars: int, max_degree: int) -> int:
    """Number of monomials of total degree <= max_degree in nvars variables."""
    return comb(nvars + max_degree, nvars)


def monomial_basis(nvars: int, max_degree: int) -> list[Exponent]:
    """All exponent tuples of total degree <= max_degree, graded-lex ordered.

    The position of a tuple in the returned list is its ordinal; for a fixed
    ``nvars`` the ordinal of a monomial does not depend on ``max_degree``.
    """
    if nvars < 1:
        raise ValueError("nvars must be positive")
    if max_degree < 0:
        raise ValueError("max_degree must be nonnegative")
    if basis_size(nvars, max_degree) > MAX_BASIS_SIZE:
        raise CapacityError(
            f"basis of degree {max_degree} in {nvars} variables has "
            f"{basis_size(nvars, max_degree)} elements")
    return list(_basis(nvars, max_degree))


@lru_cache(maxsize=None)
def basis_index(nvars: int, max_degree: int) -> dict[Exponent, int]:
    """Map exponent tuple -> ordinal for the graded-lex basis."""
    return {e: i for i, e in enumerate(monomial_basis(nvars, max_degree))}


def monomial_ordinal(exponents: Sequence[int]) -> int:
    """Graded-lex ordinal of a single exponent vector."""
    e = tuple(int(a) for a in exponents)
    if any(a < 0 for a in e):
        raise ValueError("exponents must be nonnegative")
    deg = sum(e)
    return basis_index(len(e), deg)[e]


def _add_exp(a: Exponent, b: Exponent) -> Exponent:
    return tuple(i + j for i, j in zip(a, b))


class Polynomial:
    """Real polynomial stored as a map from exponent tuples to coefficients.

    Instances are treated as immutable; arithmetic returns new objects and
    exact zeros are never stored.
    """

    __slots__ = ("_terms", "_nvars")

    def __init__(self, terms: Mapping[Sequence[int], float] | Iterable, nvars: int):
        if nvars < 1:
            raise ValueError("nvars must be positive")
        items = terms.items() if isinstance(terms, Mapping) else terms
        acc: dict[Exponent, float] = {}
        for exps, coef in items:
            e = tuple(int(a) for a in exps)
            if len(e) != nvars:
                raise ValueError(
                    f"exponent {e} has length {len(e)}, expected {nvars}")
            if any(a < 0 for a in e):
                raise ValueError(f"negative exponent in {e}")
            acc[e] = acc.get(e, 0.0) + float(coef)
        self._terms = {e: c for e, c in acc.items() if c != 0.0}
        self._nvars = nvars

    # constructors -------------------------------------------------------

    @classmethod
    def constant(cls, value: float, nvars: int) -> Polynomial:
        return cls({(0,) * nvars: value}, nvars)

    @classmethod
    def variable(cls, index: int, nvars: int) -> Polynomial:
        if not 0 <= index < nvars:
            raise ValueError(f"variable index {index} out of range")
        e = [0] * nvars
        e[index] = 1
        return cls({tuple(e): 1.0}, nvars)

    @classmethod
    def monomial(cls, exponents: Sequence[int], coef: float = 1.0) -> Polynomial:
        return cls({tuple(exponents): coef}, len(exponents))

    # accessors ----------------------------------------------------------

    @property
    def nvars(self) -> int:
        return self._nvars

    @property
    def terms(self) -> dict[Exponent, float]:
        return dict(self._terms)

    @property
    def degree(self) -> int:
        """Largest total degree among nonzero terms (0 for the zero polynomial)."""
        return max((sum(e) for e in self._terms), default=0)

    def is_zero(self) -> bool:
        return not self._terms

    def coefficient(self, exponents: Sequence[int]) -> float:
        return self._terms.get(tuple(exponents), 0.0)

    def sorted_terms(self) -> list[tuple[Exponent, float]]:
        """Terms in graded-lex order."""
        return sorted(self._terms.items(), key=lambda kv: monomial_ordinal(kv[0]))

    def uses_time(self) -> bool:
        return any(e[0] != 0 for e in self._terms)

    # arithmetic ---------------------------------------------------------

    def _check(self, other: Polynomial) -> None:
        if other.nvars != self.nvars:
            raise ValueError(
                f"dimension mismatch: {self.nvars} vs {other.nvars} variables")

    def _coerce(self, other) -> Polynomial:
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        return Polynomial.constant(float(other), self.nvars)

    def __add__(self, other) -> Polynomial:
        other = self._coerce(other)
        acc = dict(self._terms)
        for e, c in other._terms.items():
            acc[e] = acc.get(e, 0.0) + c
        return Polynomial(acc, self.nvars)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return Polynomial({e: -c for e, c in self._terms.items()}, self.nvars)

    def __sub__(self, other) -> Polynomial:
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> Polynomial:
        return self._coerce(other) - self

    def __mul__(self, other) -> Polynomial:
        if not isinstance(other, Polynomial):
            a = float(other)
            return Polynomial({e: a * c for e, c in self._terms.items()}, self.nvars)
        self._check(other)
        acc: dict[Exponent, float] = {}
        for e1, c1 in self._terms.items():
            for e2, c2 in other._terms.items():
                e = _add_exp(e1, e2)
                acc[e] = acc.get(e, 0.0) + c1 * c2
        return Polynomial(acc, self.nvars)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> Polynomial:
        if k < 0:
            raise ValueError("negative power")
        out = Polynomial.constant(1.0, self.nvars)
        for _ in range(k):
            out = out * self
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self) -> int:
        return hash((self.nvars, frozenset(self._terms.items())))

    def allclose(self, other: Polynomial, atol: float = 1e-12) -> bool:
        self._check(other)
        keys = set(self._terms) | set(other._terms)
        return all(abs(self.coefficient(e) - other.coefficient(e)) <= atol for e in keys)

    # calculus / substitution -------------------------------------------

    def diff(self, var: int) -> Polynomial:
        """Partial derivative with respect to variable ``var``."""
        acc: dict[Exponent, float] = {}
        for e, c in self._terms.items():
            if e[var] == 0:
                continue
            ne = list(e)
            ne[var] -= 1
            acc[tuple(ne)] = acc.get(tuple(ne), 0.0) + c * e[var]
        return Polynomial(acc, self.nvars)

    def scale_variable(self, var: int, factor: float) -> Polynomial:
        """Substitute ``v_var -> factor * v_var``."""
        return Polynomial({e: c * factor ** e[var] for e, c in self._terms.items()},
                          self.nvars)

    def affine_substitute(self, var: int, offset: float, factor: float) -> Polynomial:
        """Substitute ``v_var -> offset + factor * v_var``."""
        acc: dict[Exponent, float] = {}
        for e, c in self._terms.items():
            k = e[var]
            for j in range(k + 1):
                ne = e[:var] + (j,) + e[var + 1:]
                acc[ne] = acc.get(ne, 0.0) + c * comb(k, j) * factor ** j * offset ** (k - j)
        return Polynomial(acc, self.nvars)

    def fix_variable(self, var: int, value: float) -> Polynomial:
        """Substitute the constant ``value`` for variable ``var``."""
        acc: dict[Exponent, float] = {}
        for e, c in self._terms.items():
            ne = e[:var] + (0,) + e[var + 1:]
            acc[ne] = acc.get(ne, 0.0) + c * value ** e[var]
        return Polynomial(acc, self.nvars)

    def __call__(self, point: Sequence[float]) -> float:
        return eval_poly(self, point)

    def __repr__(self) -> str:
        if not self._terms:
            return "Polynomial(0)"
        parts = []
        for e, c in self.sorted_terms():
            mono = "*".join(
                (f"v{i}" if a == 1 else f"v{i}^{a}") for i, a in enumerate(e) if a)
            parts.append(f"{c:g}" + (f"*{mono}" if mono else ""))
        return "Polynomial(" + " + ".join(parts) + ")"


def eval_poly(p: Polynomial, point: Sequence[float]) -> float:
    """Evaluate ``p`` at ``point`` by summing terms.

    Term summation is exact for the small degrees used here and keeps the
    evaluation independent of any variable ordering.
    """
    pt = np.asarray(point, dtype=float)
    if pt.shape != (p.nvars,):
        raise ValueError(
            f"dimension mismatch: point has shape {pt.shape}, polynomial has "
            f"{p.nvars} variables")
    total = 0.0
    for e, c in p._terms.items():
        total += c * float(np.prod(pt ** np.asarray(e)))
    return total


def eval_poly_batch(p: Polynomial, points: np.ndarray) -> np.ndarray:
    """Evaluate ``p`` at each row of ``points`` (shape (k, nvars))."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != p.nvars:
        raise ValueError("dimension mismatch")
    out = np.zeros(pts.shape[0])
    for e, c in p._terms.items():
        out += c * np.prod(pts ** np.asarray(e), axis=1)
    return out


def lie_derivative(v: Polynomial, field: Sequence[Polynomial]) -> Polynomial:
    """Return dv/dt + sum_i dv/dx_i * f_i for the vector field ``field``."""
    n = v.nvars - 1
    if len(field) != n:
        raise ValueError(
            f"dimension mismatch: field has {len(field)} components, "
            f"expected {n}")
    for f in field:
        if f.nvars != v.nvars:
            raise ValueError("dimension mismatch between v and field")
    out = v.diff(0)
    for i, f in enumerate(field):
        dv = v.diff(i + 1)
        if not dv.is_zero():
            out = out + dv * f
    return out
