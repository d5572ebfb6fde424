"""Double-form fields on flat boxes and tori, and their differential operators.

Two coefficient modes share every operator:

* polynomial mode: coefficients are elements of a rational polynomial ring,
  so derivatives, products and box integrals are exact;
* grid mode: coefficients are numpy arrays of samples on a uniform grid,
  differentiated by second-order finite differences.

The connection is flat, so the covariant exterior derivative is the plain
alternated coordinate derivative in the global orthonormal frame.
"""

from __future__ import annotations

import random
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Any

import numpy as np
from sympy import QQ
from sympy.polys.rings import PolyElement, PolyRing, ring

from . import fiber_algebra as fa
from .fiber_algebra import DomainError, DoubleForm, MultiIndexPair


@lru_cache(maxsize=None)
def poly_ring(d: int) -> PolyRing:
    names = ",".join(f"x{i}" for i in range(1, d + 1)) if d > 0 else "x0"
    return ring(names, QQ)[0]


@dataclass(frozen=True)
class FlatDomain:
    """A flat box [0, L_1] x ... x [0, L_d] or the torus with the same periods.

    ``grid`` holds the number of intervals per axis; a box axis with n
    intervals carries n + 1 nodes, a periodic axis carries n.
    """

    d: int
    kind: str = "box"
    extent: tuple = ()
    grid: tuple | None = None

    def __post_init__(self):
        if self.d < 1:
            raise DomainError("dimension must be at least 1")
        if self.kind not in ("box", "torus"):
            raise DomainError(f"unknown domain kind {self.kind!r}")
        extent = tuple(self.extent) if self.extent else (1,) * self.d
        if len(extent) != self.d:
            raise DomainError("extent must have one entry per axis")
        object.__setattr__(self, "extent", tuple(Fraction(e) if isinstance(e, (int, str)) else e for e in extent))
        if self.grid is not None:
            grid = (int(self.grid),) * self.d if np.isscalar(self.grid) else tuple(int(n) for n in self.grid)
            if len(grid) != self.d or min(grid) < 4:
                raise DomainError("grid needs at least 4 intervals on every axis")
            object.__setattr__(self, "grid", grid)

    @property
    def ring(self) -> PolyRing:
        return poly_ring(self.d)

    @property
    def spacing(self) -> tuple[float, ...]:
        if self.grid is None:
            raise DomainError("domain has no grid")
        return tuple(float(L) / n for L, n in zip(self.extent, self.grid))

    @property
    def shape(self) -> tuple[int, ...]:
        if self.grid is None:
            raise DomainError("domain has no grid")
        return tuple(n + 1 if self.kind == "box" else n for n in self.grid)

    def coordinates(self) -> list[np.ndarray]:
        axes = [np.arange(s) * h for s, h in zip(self.shape, self.spacing)]
        return list(np.meshgrid(*axes, indexing="ij"))

    def with_grid(self, grid) -> "FlatDomain":
        return FlatDomain(self.d, self.kind, self.extent, grid)

    def to_json(self) -> dict:
        out: dict[str, Any] = {"d": self.d, "kind": self.kind, "extent": [str(e) for e in self.extent]}
        if self.grid is not None:
            out["grid"] = list(self.grid)
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "FlatDomain":
        extent = tuple(Fraction(str(e)) for e in data.get("extent", ())) or ()
        return cls(int(data["d"]), data.get("kind", "box"), extent, data.get("grid"))


def _coeff_mode(c: Any) -> str:
    if isinstance(c, PolyElement):
        return "poly"
    if isinstance(c, np.ndarray):
        return "grid"
    return "constant"


class DoubleFormField:
    """A double-form valued field: a domain together with a fiber value whose
    coefficients are polynomials or sample arrays."""

    __slots__ = ("domain", "value")

    def __init__(self, domain: FlatDomain, value: DoubleForm):
        if value.d != domain.d:
            raise DomainError(f"field of dimension {value.d} on a domain of dimension {domain.d}")
        self.domain = domain
        self.value = value

    @property
    def k(self) -> int:
        return self.value.k

    @property
    def m(self) -> int:
        return self.value.m

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def coeffs(self) -> dict[MultiIndexPair, Any]:
        return self.value.coeffs

    @property
    def mode(self) -> str:
        for c in self.value.coeffs.values():
            return _coeff_mode(c)
        return "poly" if self.domain.grid is None else "grid"

    @classmethod
    def zero(cls, domain: FlatDomain, k: int, m: int) -> "DoubleFormField":
        return cls(domain, DoubleForm.zero(domain.d, k, m))

    @classmethod
    def from_polys(cls, domain: FlatDomain, k: int, m: int, coeffs: Mapping) -> "DoubleFormField":
        R = domain.ring
        return cls(domain, DoubleForm(domain.d, k, m, {key: R(c) for key, c in coeffs.items()}))

    @classmethod
    def constant(cls, domain: FlatDomain, value: DoubleForm) -> "DoubleFormField":
        """Lift a fiber value to a constant field in the domain's coefficient mode."""
        if domain.grid is None:
            R = domain.ring
            return cls(domain, value.map_coeffs(lambda c: R(c)))
        shape = domain.shape
        return cls(domain, value.map_coeffs(lambda c: np.full(shape, float(c))))

    def like(self, value: DoubleForm) -> "DoubleFormField":
        return DoubleFormField(self.domain, value)

    def is_zero(self) -> bool:
        return self.value.is_zero()

    def _check(self, other: "DoubleFormField") -> None:
        if not isinstance(other, DoubleFormField):
            raise TypeError(f"expected DoubleFormField, got {type(other).__name__}")
        if other.domain.d != self.domain.d or other.domain.kind != self.domain.kind:
            raise DomainError("fields live on different domains")

    def __add__(self, other: "DoubleFormField") -> "DoubleFormField":
        self._check(other)
        return self.like(self.value + other.value)

    def __sub__(self, other: "DoubleFormField") -> "DoubleFormField":
        self._check(other)
        return self.like(self.value - other.value)

    def __neg__(self) -> "DoubleFormField":
        return self.like(-self.value)

    def __mul__(self, s: Any) -> "DoubleFormField":
        return self.like(self.value * s)

    __rmul__ = __mul__

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DoubleFormField):
            return NotImplemented
        return self.domain.d == other.domain.d and self.value == other.value

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"DoubleFormField({self.domain.kind}, {self.value!r})"

    def max_abs(self) -> float:
        """Largest absolute coefficient sample (grid mode)."""
        vals = [np.max(np.abs(c)) for c in self.value.coeffs.values()]
        return float(max(vals)) if vals else 0.0

    def degree(self) -> int:
        return max((c.degree() for c in self.value.coeffs.values() if isinstance(c, PolyElement)), default=-1)


# --------------------------------------------------------------------------
# Pointwise lifts of the fiber algebra

def lift(fn: Callable[[DoubleForm], DoubleForm], psi: DoubleFormField) -> DoubleFormField:
    return psi.like(fn(psi.value))


def transpose(psi: DoubleFormField) -> DoubleFormField:
    return psi.like(fa.transpose(psi.value))


def hodge(psi: DoubleFormField, side: str = "form") -> DoubleFormField:
    return psi.like(fa.hodge(psi.value, side))


def wedge(a: DoubleForm | DoubleFormField, b: DoubleForm | DoubleFormField) -> DoubleFormField:
    """Wedge a field with a field or with a constant fiber value."""
    domain = a.domain if isinstance(a, DoubleFormField) else b.domain  # type: ignore[union-attr]
    av = a.value if isinstance(a, DoubleFormField) else a
    bv = b.value if isinstance(b, DoubleFormField) else b
    return DoubleFormField(domain, fa.wedge(av, bv))


def g_wedge(psi: DoubleFormField) -> DoubleFormField:
    return lift(fa.g_wedge, psi)


def trace_g(psi: DoubleFormField) -> DoubleFormField:
    return lift(fa.trace_g, psi)


def bianchi(psi: DoubleFormField) -> DoubleFormField:
    return lift(fa.bianchi, psi)


def bianchi_v(psi: DoubleFormField) -> DoubleFormField:
    return lift(fa.bianchi_v, psi)


def a_operator(A: DoubleForm, psi: DoubleFormField, which: str) -> DoubleFormField:
    return psi.like(fa.a_operator_family(A, psi.value, which))


def field_interior(x: Sequence[Any], psi: DoubleFormField, side: str = "form") -> DoubleFormField:
    return psi.like(fa.interior(x, psi.value, side))


def apply_fiber_matrix(
    matrix: np.ndarray, psi: DoubleFormField, target: tuple[int, int]
) -> DoubleFormField:
    """Apply a constant pointwise linear map given in the canonical basis."""
    d = psi.d
    src = fa.enumerate_basis(d, psi.k, psi.m)
    tk, tm = target
    if not fa.in_range(d, tk, tm):
        return DoubleFormField.zero(psi.domain, tk, tm)
    tgt = fa.enumerate_basis(d, tk, tm)
    if matrix.shape != (len(tgt), len(src)):
        raise DomainError(f"matrix shape {matrix.shape} does not map ({psi.k},{psi.m}) to {target}")
    out: dict[MultiIndexPair, Any] = {}
    for col, key in enumerate(src):
        c = psi.coeffs.get(key)
        if c is None:
            continue
        for row in np.nonzero(matrix[:, col])[0]:
            q = matrix[row, col]
            term = fa.scale(c, Fraction(q)) if isinstance(q, (int, Fraction)) else c * q
            tkey = tgt[row]
            out[tkey] = out[tkey] + term if tkey in out else term
    return DoubleFormField(psi.domain, DoubleForm._raw(d, tk, tm, out))


def apply_pointwise(op: Callable[[DoubleForm], DoubleForm], psi: DoubleFormField) -> DoubleFormField:
    """Apply a linear fiber map with constant coefficients to a field."""
    matrix, target = fa.operator_matrix(op, psi.d, psi.k, psi.m)
    return apply_fiber_matrix(matrix, psi, target)


# --------------------------------------------------------------------------
# Derivatives

def partial(c: Any, axis: int, domain: FlatDomain) -> Any:
    """Derivative of one coefficient along ``axis`` (1-based)."""
    if isinstance(c, PolyElement):
        return c.diff(c.ring.gens[axis - 1])
    if isinstance(c, np.ndarray):
        h = domain.spacing[axis - 1]
        ax = axis - 1
        if domain.kind == "torus":
            return (np.roll(c, -1, axis=ax) - np.roll(c, 1, axis=ax)) / (2.0 * h)
        return _box_gradient(c, h, ax)
    return 0


def _box_gradient(c: np.ndarray, h: float, ax: int) -> np.ndarray:
    """Central differences inside, one-sided four-point closure at the faces.

    The face stencil is second order with the same leading error h^2 f'''/6
    as the central stencil, so the error field is smooth up to the faces and
    composed derivatives stay second order in the max norm.
    """
    c = np.moveaxis(c, ax, 0)
    out = np.empty_like(c, dtype=float)
    out[1:-1] = (c[2:] - c[:-2]) / (2.0 * h)
    out[0] = (-4.0 * c[0] + 7.0 * c[1] - 4.0 * c[2] + c[3]) / (2.0 * h)
    out[-1] = (4.0 * c[-1] - 7.0 * c[-2] + 4.0 * c[-3] - c[-4]) / (2.0 * h)
    return np.moveaxis(out, 0, ax)


def d_nabla(psi: DoubleFormField, side: str = "form") -> DoubleFormField:
    """Exterior covariant derivative on the form part, or on the vector part."""
    fa._check_side(side)
    if side == "vector":
        return transpose(d_nabla(transpose(psi), "form"))
    d, k, m = psi.d, psi.k + 1, psi.m
    if not fa.in_range(d, k, m):
        return DoubleFormField.zero(psi.domain, k, m)
    out: dict[MultiIndexPair, Any] = {}
    for (i, j), c in psi.coeffs.items():
        for axis in range(1, d + 1):
            s = fa.merge_sign((axis,), i)
            if not s:
                continue
            dc = partial(c, axis, psi.domain)
            if fa.is_zero(dc):
                continue
            key = MultiIndexPair(tuple(sorted(i + (axis,))), j)
            term = dc if s > 0 else -dc
            out[key] = out[key] + term if key in out else term
    return psi.like(DoubleForm._raw(d, k, m, out))


def delta_nabla(psi: DoubleFormField, side: str = "form") -> DoubleFormField:
    """Codifferential (-1)^(dk+d+1) * d *, conjugated by the Hodge star of ``side``."""
    fa._check_side(side)
    d = psi.d
    deg = psi.k if side == "form" else psi.m
    if deg == 0:
        k, m = (psi.k - 1, psi.m) if side == "form" else (psi.k, psi.m - 1)
        return DoubleFormField.zero(psi.domain, k, m)
    out = hodge(d_nabla(hodge(psi, side), "form" if side == "form" else "vector"), side)
    return out * (-1) ** (d * deg + d + 1)


def d(psi: DoubleFormField) -> DoubleFormField:
    return d_nabla(psi, "form")


def d_v(psi: DoubleFormField) -> DoubleFormField:
    return d_nabla(psi, "vector")


def delta(psi: DoubleFormField) -> DoubleFormField:
    return delta_nabla(psi, "form")


def delta_v(psi: DoubleFormField) -> DoubleFormField:
    return delta_nabla(psi, "vector")


def laplacian(psi: DoubleFormField) -> DoubleFormField:
    """Componentwise coordinate Laplacian."""
    def lap(c):
        total = 0
        for axis in range(1, psi.d + 1):
            total = total + partial(partial(c, axis, psi.domain), axis, psi.domain)
        return total

    return psi.like(psi.value.map_coeffs(lap))


# --------------------------------------------------------------------------
# Zero-order plugin

@dataclass
class ZeroOrderPlugin:
    """Tensorial terms added to H and F: D raises both degrees, S moves one
    degree from the vector part to the form part.

    ``D`` and ``S`` are linear fiber maps accepting any bidegree in dimension
    ``d``; their metric adjoints are derived from the canonical-basis matrices.
    The structural hypotheses are checked on construction for every bidegree.
    """

    d: int
    D: Callable[[DoubleForm], DoubleForm] = field(default=lambda a: DoubleForm.zero(a.d, a.k + 1, a.m + 1))
    S: Callable[[DoubleForm], DoubleForm] = field(default=lambda a: DoubleForm.zero(a.d, a.k + 1, a.m - 1))

    def __post_init__(self):
        self.validate()

    def _matrix(self, op, k, m, shift):
        mat, target = fa.operator_matrix(op, self.d, k, m)
        if mat.size and target != (k + shift[0], m + shift[1]):
            raise DomainError(f"plugin map sends ({k},{m}) to {target}, expected {(k + shift[0], m + shift[1])}")
        return mat

    def d_matrix(self, k: int, m: int) -> np.ndarray:
        return self._matrix(self.D, k, m, (1, 1))

    def s_matrix(self, k: int, m: int) -> np.ndarray:
        return self._matrix(self.S, k, m, (1, -1))

    def d_star_matrix(self, k: int, m: int) -> np.ndarray:
        """Adjoint of D, mapping (k, m) to (k-1, m-1)."""
        if not fa.in_range(self.d, k - 1, m - 1):
            return np.zeros((0, fa.fiber_dim(self.d, k, m)), dtype=object)
        return self.d_matrix(k - 1, m - 1).T

    def s_star_matrix(self, k: int, m: int) -> np.ndarray:
        """Adjoint of S, mapping (k, m) to (k-1, m+1)."""
        if not fa.in_range(self.d, k - 1, m + 1):
            return np.zeros((0, fa.fiber_dim(self.d, k, m)), dtype=object)
        return self.s_matrix(k - 1, m + 1).T

    def validate(self) -> None:
        d = self.d
        for k in range(d + 1):
            for m in range(d + 1):
                if fa.in_range(d, k + 1, m + 1):
                    self.d_matrix(k, m)
                for b in fa.enumerate_basis(d, k, m):
                    e = DoubleForm._raw(d, k, m, {b: 1})
                    if fa.transpose(self.D(e)) != self.D(fa.transpose(e)):
                        raise DomainError("plugin D does not commute with transposition")
                if not fa.in_range(d, k + 1, m - 1):
                    continue
                # S psi = (S* psi^T)^T, written on matrices
                lhs = self.s_matrix(k, m)
                rhs = (
                    fa.operator_matrix(fa.transpose, d, m - 1, k + 1)[0]
                    .dot(self.s_star_matrix(m, k))
                    .dot(fa.operator_matrix(fa.transpose, d, k, m)[0])
                )
                if np.any(lhs - rhs != 0):
                    raise DomainError("plugin S is not the transpose-conjugate of its adjoint")

    def apply(self, which: str, psi: DoubleFormField) -> DoubleFormField:
        if psi.d != self.d:
            raise DomainError(f"plugin built for dimension {self.d}, field has dimension {psi.d}")
        k, m = psi.k, psi.m
        if which == "H":
            return apply_fiber_matrix(self.d_matrix(k, m), psi, (k + 1, m + 1)) if fa.in_range(self.d, k + 1, m + 1) else DoubleFormField.zero(psi.domain, k + 1, m + 1)
        if which == "Hstar":
            return apply_fiber_matrix(self.d_star_matrix(k, m), psi, (k - 1, m - 1))
        if which == "F":
            return apply_fiber_matrix(self.s_matrix(k, m), psi, (k + 1, m - 1)) if fa.in_range(self.d, k + 1, m - 1) else DoubleFormField.zero(psi.domain, k + 1, m - 1)
        if which == "Fstar":
            return apply_fiber_matrix(self.s_star_matrix(k, m), psi, (k - 1, m + 1))
        raise DomainError(f"unknown operator {which!r}")


def second_order(psi: DoubleFormField, which: str, plugin: ZeroOrderPlugin | None = None) -> DoubleFormField:
    """The curl-curl, div-div, curl-div and div-curl operators."""
    half = Fraction(1, 2)
    if which == "H":
        out = (d_v(d(psi)) + d(d_v(psi))) * half
    elif which == "Hstar":
        out = (delta(delta_v(psi)) + delta_v(delta(psi))) * half
    elif which == "Fstar":
        out = (d_v(delta(psi)) + delta(d_v(psi))) * half
    elif which == "F":
        out = (d(delta_v(psi)) + delta_v(d(psi))) * half
    else:
        raise DomainError(f"unknown operator {which!r}; expected H, Hstar, F or Fstar")
    if plugin is not None:
        out = out + plugin.apply(which, psi)
    return out


def H(psi, plugin=None):
    return second_order(psi, "H", plugin)


def H_star(psi, plugin=None):
    return second_order(psi, "Hstar", plugin)


def F(psi, plugin=None):
    return second_order(psi, "F", plugin)


def F_star(psi, plugin=None):
    return second_order(psi, "Fstar", plugin)


def bilaplacian(psi: DoubleFormField, plugin: ZeroOrderPlugin | None = None) -> DoubleFormField:
    """B = H H* + H* H + F* F + F F*."""
    return (
        H(H_star(psi, plugin), plugin)
        + H_star(H(psi, plugin), plugin)
        + F_star(F(psi, plugin), plugin)
        + F(F_star(psi, plugin), plugin)
    )


# --------------------------------------------------------------------------
# Integration

def integrate(c: Any, domain: FlatDomain) -> Any:
    """Integral of one coefficient over the domain.

    Polynomials integrate exactly on boxes.  Grid samples use the trapezoid
    rule on boxes and the rectangle rule on tori.
    """
    if isinstance(c, PolyElement):
        if domain.kind != "box":
            raise DomainError("exact polynomial integration is only defined on boxes")
        total = Fraction(0)
        for exps, coef in c.terms():
            term = Fraction(int(coef.numerator), int(coef.denominator))
            for e, L in zip(exps, domain.extent):
                term *= Fraction(L) ** (e + 1) / (e + 1)
            total += term
        return total
    if isinstance(c, np.ndarray):
        return float(np.sum(c * quadrature_weights(domain)))
    if domain.kind == "torus" or domain.grid is None:
        vol = Fraction(1)
        for L in domain.extent:
            vol *= Fraction(L)
        return c * vol
    return c * float(np.prod([float(L) for L in domain.extent]))


@lru_cache(maxsize=64)
def _weights(shape: tuple, spacing: tuple, kind: str) -> np.ndarray:
    w = np.ones(shape)
    for ax, (n, h) in enumerate(zip(shape, spacing)):
        v = np.full(n, h)
        if kind == "box":
            v[0] = v[-1] = h / 2
        idx = [None] * len(shape)
        idx[ax] = slice(None)
        w = w * v[tuple(idx)]
    return w


def quadrature_weights(domain: FlatDomain) -> np.ndarray:
    return _weights(domain.shape, domain.spacing, domain.kind)


def l2_inner(psi: DoubleFormField, eta: DoubleFormField) -> Any:
    return integrate(fa.inner(psi.value, eta.value), psi.domain) if not psi.is_zero() and not eta.is_zero() else 0


def l2_norm(psi: DoubleFormField) -> float:
    return float(np.sqrt(float(l2_inner(psi, psi))))


# --------------------------------------------------------------------------
# Sampling and construction helpers

def sample(psi: DoubleFormField, domain: FlatDomain) -> DoubleFormField:
    """Evaluate a polynomial field at the nodes of a gridded domain."""
    X = domain.coordinates()

    def ev(c):
        if not isinstance(c, PolyElement):
            return np.full(domain.shape, float(c))
        out = np.zeros(domain.shape)
        for exps, coef in c.terms():
            term = np.full(domain.shape, float(coef))
            for x, e in zip(X, exps):
                if e:
                    term = term * x**e
            out += term
        return out

    return DoubleFormField(domain, psi.value.map_coeffs(ev))


def random_polynomial(R: PolyRing, rng: random.Random, degree: int, n_terms: int) -> PolyElement:
    d = R.ngens
    terms = {}
    for _ in range(n_terms):
        total = rng.randint(0, degree)
        exps = [0] * d
        for _ in range(total):
            exps[rng.randrange(d)] += 1
        coef = Fraction(rng.randint(-5, 5), rng.randint(1, 3))
        terms[tuple(exps)] = terms.get(tuple(exps), 0) + coef
    return R.from_dict({e: QQ(c.numerator, c.denominator) for e, c in terms.items() if c})


def random_field(
    domain: FlatDomain,
    k: int,
    m: int,
    rng: random.Random,
    degree: int = 3,
    max_keys: int = 4,
    n_terms: int = 4,
) -> DoubleFormField:
    """A sparse random polynomial field with exact rational coefficients."""
    basis = fa.enumerate_basis(domain.d, k, m)
    keys = rng.sample(basis, min(len(basis), rng.randint(1, max_keys)))
    R = domain.ring
    coeffs = {key: random_polynomial(R, rng, degree, n_terms) for key in keys}
    return DoubleFormField(domain, DoubleForm(domain.d, k, m, coeffs))


def bump(domain: FlatDomain, power: int = 2) -> PolyElement:
    """Product of (x_i (L_i - x_i))^power; vanishes with derivatives up to power-1 on the box boundary."""
    R = domain.ring
    out = R(1)
    for x, L in zip(R.gens, domain.extent):
        out *= (x * (R(QQ(Fraction(L).numerator, Fraction(L).denominator)) - x)) ** power
    return out


def multiply(psi: DoubleFormField, f: Any) -> DoubleFormField:
    """Multiply every coefficient by the scalar function ``f``."""
    return psi.like(psi.value.map_coeffs(lambda c: c * f))


# --------------------------------------------------------------------------
# Serialization

def _poly_to_json(p: PolyElement) -> list[dict]:
    return [
        {"exps": list(e), "coef": str(Fraction(int(c.numerator), int(c.denominator)))}
        for e, c in sorted(p.terms())
    ]


def field_to_json(psi: DoubleFormField) -> dict:
    coeffs = []
    for key in sorted(psi.coeffs):
        c = psi.coeffs[key]
        entry: dict[str, Any] = {"form": list(key.form_part), "vector": list(key.vector_part)}
        if isinstance(c, PolyElement):
            entry["poly"] = _poly_to_json(c)
        elif isinstance(c, np.ndarray):
            entry["samples"] = c.ravel().tolist()
        else:
            entry["poly"] = [{"exps": [0] * psi.d, "coef": str(Fraction(c))}]
        coeffs.append(entry)
    return {"domain": psi.domain.to_json(), "k": psi.k, "m": psi.m, "coeffs": coeffs}


def field_from_json(data: Mapping, domain: FlatDomain | None = None) -> DoubleFormField:
    domain = domain or FlatDomain.from_json(data["domain"])
    R = domain.ring
    coeffs: dict[tuple, Any] = {}
    for entry in data.get("coeffs", []):
        key = (tuple(entry["form"]), tuple(entry["vector"]))
        if "samples" in entry:
            coeffs[key] = np.asarray(entry["samples"], dtype=float).reshape(domain.shape)
            continue
        terms = {}
        for t in entry.get("poly", []):
            exps = tuple(int(e) for e in t["exps"])
            if len(exps) != domain.d:
                raise DomainError(f"monomial {exps} does not match dimension {domain.d}")
            c = Fraction(str(t["coef"]))
            terms[exps] = terms.get(exps, Fraction(0)) + c
        coeffs[key] = R.from_dict({e: QQ(c.numerator, c.denominator) for e, c in terms.items() if c})
    return DoubleFormField(domain, DoubleForm(domain.d, int(data["k"]), int(data["m"]), coeffs))


def verify_identities(seed: int = 0, d_max: int = 4, degree_cap: int = 3, n_fields: int = 20, **kwargs):
    """Check the identity lattice exactly on seeded random polynomial fields.

    Returns an :class:`~doubleforms.identities.IdentityReport`.
    """
    from .identities import run_identity_suite

    return run_identity_suite(seed=seed, d_max=d_max, degree_cap=degree_cap, n_fields=n_fields, **kwargs)
