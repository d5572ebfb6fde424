"""Principal symbols and the Lopatinskij–Shapiro check for the bilaplacian.

All symbols are taken at a point of the face ``x_d = 0`` with inward unit
normal ``e_d``.  A covector is split as ``η = ξ + t·dr`` with ``ξ`` tangential
and ``t = ξ_d``, and the *real symbol* ``R_L(η)`` of a homogeneous operator of
order ``n`` is defined by ``L[(η·x)^n / n! · σ] = R_L(η) σ``.  The principal
symbol in the ``D = -i∂`` convention is ``P_L = i^n R_L``.

Boundary-operator symbols are kept as polynomials in ``t`` with matrix
coefficients; substituting ``t^j σ ↦ (-i)^j (ω_0 - j λ_0)`` evaluates them on
the bounded solutions ``(ω_0 + λ_0 s) e^{-s}`` of the symbol ODE, which is the
map Ξ whose invertibility is regular ellipticity.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Any

import numpy as np

from . import fiber_algebra as fa
from .fiber_algebra import DomainError, DoubleForm

Bidegree = tuple[int, int]

INTERIOR_OPS = ("d", "delta", "d_v", "delta_v", "H", "Hstar", "F", "Fstar", "B")
OPERATOR_ORDER = {"d": 1, "delta": 1, "d_v": 1, "delta_v": 1, "H": 2, "Hstar": 2, "F": 2, "Fstar": 2, "B": 4}
BOUNDARY_ORDER = {"Ptt": 0, "Pnt": 0, "Ptn": 0, "Pnn": 0, "T": 1, "Tstar": 1, "Fb": 1, "Fbstar": 1}

# (boundary operator, interior operator or None); "Fb" is the boundary 𝔉.
BoundaryRow = tuple[str, str | None]

BOUNDARY_SETS: dict[str, tuple[BoundaryRow, ...]] = {
    "TT": (("Ptt", None), ("Ptn", None), ("Pnt", None), ("T", None), ("Fbstar", None), ("Fb", None),
           ("Ptt", "Hstar"), ("T", "Hstar")),
    "NN": (("Pnn", None), ("Ptn", None), ("Pnt", None), ("Tstar", None), ("Fbstar", None), ("Fb", None),
           ("Pnn", "H"), ("Tstar", "H")),
    "NT": (("Pnt", None), ("Pnn", None), ("Ptt", None), ("Fbstar", None), ("T", None), ("Tstar", None),
           ("Pnt", "F"), ("Fbstar", "F")),
    "TN": (("Ptn", None), ("Pnn", None), ("Ptt", None), ("Fb", None), ("T", None), ("Tstar", None),
           ("Ptn", "Fstar"), ("Fb", "Fstar")),
    "STT": (("Ptt", None), ("Pnt", None), ("T", None), ("Fbstar", None), ("Ptt", "Hstar"), ("T", "Hstar")),
    "SNN": (("Pnn", None), ("Pnt", None), ("Tstar", None), ("Fbstar", None), ("Pnn", "H"), ("Tstar", "H")),
}
FULL_SETS = ("TT", "NN", "NT", "TN")
SYMMETRIC_SETS = ("STT", "SNN")

_SHIFT = {"d": (1, 0), "delta": (-1, 0), "d_v": (0, 1), "delta_v": (0, -1), "H": (1, 1), "Hstar": (-1, -1),
          "F": (1, -1), "Fstar": (-1, 1), "B": (0, 0)}
_BOUNDARY_SHIFT = {"Ptt": (0, 0), "Pnt": (-1, 0), "Ptn": (0, -1), "Pnn": (-1, -1), "T": (0, 0),
                   "Tstar": (-1, -1), "Fb": (0, -1), "Fbstar": (-1, 0)}


def row_name(row: BoundaryRow) -> str:
    b, op = row
    return b if op is None else f"{b}.{op}"


def row_order(row: BoundaryRow) -> int:
    b, op = row
    return BOUNDARY_ORDER[b] + (0 if op is None else OPERATOR_ORDER[op])


def row_target(row: BoundaryRow, k: int, m: int) -> Bidegree:
    """Face bidegree reached by a boundary row from ambient bidegree (k, m)."""
    b, op = row
    dk, dm = _SHIFT[op] if op else (0, 0)
    bk, bm = _BOUNDARY_SHIFT[b]
    return k + dk + bk, m + dm + bm


# --------------------------------------------------------------------------
# Constant fiber matrices

def _zeros(rows: int, cols: int, exact: bool) -> np.ndarray:
    if exact:
        out = np.empty((rows, cols), dtype=object)
        out.fill(Fraction(0))
        return out
    return np.zeros((rows, cols))


def _dim(d: int, bideg: Bidegree) -> int:
    return fa.fiber_dim(d, *bideg) if fa.in_range(d, *bideg) else 0


@lru_cache(maxsize=None)
def _unit_wedge(d: int, k: int, m: int, axis: int, side: str) -> np.ndarray:
    def op(a: DoubleForm) -> DoubleForm:
        if side == "form":
            return fa.wedge(DoubleForm.basis(d, (axis,), ()), a)
        return fa.transpose(fa.wedge(DoubleForm.basis(d, (axis,), ()), fa.transpose(a)))

    target = (k + 1, m) if side == "form" else (k, m + 1)
    return _fiber_matrix(op, d, (k, m), target)


@lru_cache(maxsize=None)
def _unit_interior(d: int, k: int, m: int, axis: int, side: str) -> np.ndarray:
    target = (k - 1, m) if side == "form" else (k, m - 1)
    return _fiber_matrix(lambda a: fa.interior(fa.coordinate_vector(d, axis), a, side), d, (k, m), target)


def _fiber_matrix(op: Callable[[DoubleForm], DoubleForm], d: int, source: Bidegree, target: Bidegree) -> np.ndarray:
    rows, cols = _dim(d, target), _dim(d, source)
    if rows == 0 or cols == 0:
        return _zeros(rows, cols, True)
    mat, tgt = fa.operator_matrix(op, d, *source)
    assert tgt == target
    return mat


def _linear(unit: Callable[..., np.ndarray], d: int, k: int, m: int, v: Sequence[Any], side: str, exact: bool):
    out = None
    for axis, c in enumerate(v, start=1):
        if c == 0:
            continue
        part = unit(d, k, m, axis, side)
        part = part * c if exact else part.astype(float) * float(c)
        out = part if out is None else out + part
    if out is None:
        shape = unit(d, k, m, 1, side).shape
        out = _zeros(*shape, exact)
    return out


def wedge_matrix(d: int, k: int, m: int, v: Sequence[Any], side: str = "form", exact: bool = True) -> np.ndarray:
    """Matrix of v∧ (side 'form') or v^T∧ (side 'vector') on the (k, m) fiber."""
    return _linear(_unit_wedge, d, k, m, v, side, exact)


def interior_matrix(d: int, k: int, m: int, v: Sequence[Any], side: str = "form", exact: bool = True) -> np.ndarray:
    """Matrix of i_v (side 'form') or i^V_v (side 'vector') on the (k, m) fiber."""
    return _linear(_unit_interior, d, k, m, v, side, exact)


@lru_cache(maxsize=None)
def _projection(d: int, k: int, m: int, kind: str) -> np.ndarray:
    form_normal, vector_normal = kind[1] == "n", kind[2] == "n"
    target = (k - form_normal, m - vector_normal)
    rows, cols = _dim(d - 1, target), _dim(d, (k, m))
    mat = _zeros(rows, cols, True)
    if rows == 0 or cols == 0:
        return mat
    tindex = {b: n for n, b in enumerate(fa.enumerate_basis(d - 1, *target))}
    for col, (i, j) in enumerate(fa.enumerate_basis(d, k, m)):
        if (d in i) != form_normal or (d in j) != vector_normal:
            continue
        sign = 1
        if form_normal:
            sign *= (-1) ** (len(i) - 1)
            i = i[:-1]
        if vector_normal:
            sign *= (-1) ** (len(j) - 1)
            j = j[:-1]
        mat[tindex[fa.MultiIndexPair(i, j)], col] = Fraction(sign)
    return mat


def projection_matrix(d: int, k: int, m: int, kind: str, exact: bool = True) -> np.ndarray:
    """ℙ^{tt}, ℙ^{nt}, ℙ^{tn} or ℙ^{nn} onto the face x_d = 0 as a matrix.

    ``kind`` is one of 'Ptt', 'Pnt', 'Ptn', 'Pnn'.  Normal parts are contracted
    with the inward normal e_d, matching :mod:`doubleforms.boundary_ops`.
    """
    if kind not in ("Ptt", "Pnt", "Ptn", "Pnn"):
        raise DomainError(f"unknown projection {kind!r}")
    mat = _projection(d, k, m, kind)
    return mat if exact else mat.astype(float)


# --------------------------------------------------------------------------
# Polynomials in t with matrix coefficients

@dataclass
class SymbolPoly:
    """Σ_j t^j coeffs[j] mapping (d, source) fibers to (target_d, target) fibers."""

    d: int
    source: Bidegree
    target_d: int
    target: Bidegree
    coeffs: dict[int, np.ndarray]
    exact: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return _dim(self.target_d, self.target), _dim(self.d, self.source)

    @classmethod
    def constant(cls, d, source, target_d, target, matrix, exact=True) -> "SymbolPoly":
        return cls(d, source, target_d, target, {0: matrix}, exact)

    def _compatible(self, other: "SymbolPoly") -> None:
        if (self.d, self.source, self.target_d, self.target) != (other.d, other.source, other.target_d, other.target):
            raise DomainError("symbol polynomials have different bidegrees")

    def __add__(self, other: "SymbolPoly") -> "SymbolPoly":
        self._compatible(other)
        out = dict(self.coeffs)
        for j, c in other.coeffs.items():
            out[j] = out[j] + c if j in out else c
        return SymbolPoly(self.d, self.source, self.target_d, self.target, out, self.exact)

    def __neg__(self) -> "SymbolPoly":
        return self * -1

    def __sub__(self, other: "SymbolPoly") -> "SymbolPoly":
        return self + (-other)

    def __mul__(self, s: Any) -> "SymbolPoly":
        s = Fraction(s) if self.exact else float(s)
        return SymbolPoly(self.d, self.source, self.target_d, self.target,
                          {j: c * s for j, c in self.coeffs.items()}, self.exact)

    __rmul__ = __mul__

    def __matmul__(self, other: "SymbolPoly") -> "SymbolPoly":
        """Composition self ∘ other."""
        if (self.d, self.source) != (other.target_d, other.target):
            raise DomainError("symbol polynomials cannot be composed")
        out: dict[int, np.ndarray] = {}
        for i, a in self.coeffs.items():
            for j, b in other.coeffs.items():
                prod = a.dot(b) if a.size and b.size else _zeros(a.shape[0], b.shape[1], self.exact)
                out[i + j] = out[i + j] + prod if i + j in out else prod
        return SymbolPoly(other.d, other.source, self.target_d, self.target, out, self.exact)

    def at(self, t: Any) -> np.ndarray:
        rows, cols = self.shape
        total = _zeros(rows, cols, self.exact)
        for j, c in self.coeffs.items():
            total = total + c * (t**j)
        return total

    def trimmed(self) -> dict[int, np.ndarray]:
        return {j: c for j, c in sorted(self.coeffs.items()) if c.size and np.any(c != 0)}

    def equals(self, other: "SymbolPoly") -> bool:
        self._compatible(other)
        a, b = self.trimmed(), other.trimmed()
        if a.keys() != b.keys():
            return False
        return all(np.array_equal(a[j], b[j]) for j in a)


# --------------------------------------------------------------------------
# Principal symbols of the interior operators

def _covector(d: int, xi: Sequence[Any], exact: bool) -> list:
    if len(xi) != d:
        raise DomainError(f"covector needs {d} components, got {len(xi)}")
    v = [Fraction(c) if exact else float(c) for c in xi]
    if all(c == 0 for c in v):
        raise DomainError("the principal symbol needs a nonzero covector")
    return v


def _first_order(op: str, d: int, k: int, m: int, xi_tan: list, exact: bool) -> SymbolPoly:
    """Real symbol of d, δ, d_V or δ_V at η = ξ + t e_d, a polynomial of degree 1 in t."""
    side = "vector" if op in ("d_v", "delta_v") else "form"
    wedge = op in ("d", "d_v")
    mat = wedge_matrix if wedge else interior_matrix
    sign = 1 if wedge else -1
    normal = [0] * (d - 1) + [1]
    dk, dm = _SHIFT[op]
    coeffs = {0: mat(d, k, m, xi_tan, side, exact) * sign, 1: mat(d, k, m, normal, side, exact) * sign}
    return SymbolPoly(d, (k, m), d, (k + dk, m + dm), coeffs, exact)


def interior_symbol(op: str, d: int, k: int, m: int, xi_tan: Sequence[Any], exact: bool = True) -> SymbolPoly:
    """Real symbol of an interior operator at η = ξ + t e_d as a polynomial in t.

    ``xi_tan`` has d components with the last one ignored; the composite
    operators are assembled from their definitions in terms of d and δ.
    """
    xi = [Fraction(c) if exact else float(c) for c in xi_tan[: d - 1]] + [0]
    first = lambda o, kk, mm: _first_order(o, d, kk, mm, xi, exact)  # noqa: E731
    half = Fraction(1, 2) if exact else 0.5
    if op in ("d", "delta", "d_v", "delta_v"):
        return first(op, k, m)
    if op == "H":
        return ((first("d_v", k + 1, m) @ first("d", k, m)) + (first("d", k, m + 1) @ first("d_v", k, m))) * half
    if op == "Hstar":
        return ((first("delta", k, m - 1) @ first("delta_v", k, m))
                + (first("delta_v", k - 1, m) @ first("delta", k, m))) * half
    if op == "Fstar":
        return ((first("d_v", k - 1, m) @ first("delta", k, m))
                + (first("delta", k, m + 1) @ first("d_v", k, m))) * half
    if op == "F":
        return ((first("d", k, m - 1) @ first("delta_v", k, m))
                + (first("delta_v", k + 1, m) @ first("d", k, m))) * half
    if op == "B":
        sym = lambda o, kk, mm: interior_symbol(o, d, kk, mm, xi, exact)  # noqa: E731
        return (sym("H", k - 1, m - 1) @ sym("Hstar", k, m) + sym("Hstar", k + 1, m + 1) @ sym("H", k, m)
                + sym("Fstar", k + 1, m - 1) @ sym("F", k, m) + sym("F", k - 1, m + 1) @ sym("Fstar", k, m))
    raise DomainError(f"unknown operator {op!r}; expected one of {', '.join(INTERIOR_OPS)}")


@dataclass
class SymbolOperator:
    """P_L(ξ) = i^order R_L(ξ) with R_L exact or float."""

    op: str
    d: int
    source: Bidegree
    target: Bidegree
    order: int
    real: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return (1j**self.order) * self.real.astype(float)

    def compose(self, inner: "SymbolOperator") -> "SymbolOperator":
        """P_self ∘ P_inner, exact in the real symbols."""
        if inner.target != self.source or inner.d != self.d:
            raise DomainError("symbols cannot be composed: bidegrees differ")
        return SymbolOperator(f"{self.op}.{inner.op}", self.d, inner.source, self.target,
                              self.order + inner.order, self.real.dot(inner.real))


def principal_symbol(op: str, d: int, k: int, m: int, xi: Sequence[Any], exact: bool = True) -> SymbolOperator:
    """Principal symbol of d, δ, d_V, δ_V, H, H*, F, F* or B at the covector ξ."""
    if op not in INTERIOR_OPS:
        raise DomainError(f"unknown operator {op!r}; expected one of {', '.join(INTERIOR_OPS)}")
    v = _covector(d, xi, exact)
    poly = interior_symbol(op, d, k, m, v, exact)
    real = poly.at(v[-1])
    return SymbolOperator(op, d, (k, m), poly.target, OPERATOR_ORDER[op], real)


# --------------------------------------------------------------------------
# Boundary symbols

def _face_first_order(op: str, d: int, bideg: Bidegree, xi_tan: list, exact: bool) -> SymbolPoly:
    """Symbol of the face operators d, δ, d_V, δ_V (degree 0 in t)."""
    k, m = bideg
    side = "vector" if op in ("d_v", "delta_v") else "form"
    wedge = op in ("d", "d_v")
    mat = (wedge_matrix if wedge else interior_matrix)(d - 1, k, m, xi_tan[: d - 1], side, exact)
    dk, dm = _SHIFT[op]
    return SymbolPoly.constant(d - 1, bideg, d - 1, (k + dk, m + dm), mat * (1 if wedge else -1), exact)


def _proj(kind: str, d: int, bideg: Bidegree, exact: bool) -> SymbolPoly:
    dk, dm = _BOUNDARY_SHIFT[kind]
    target = (bideg[0] + dk, bideg[1] + dm)
    return SymbolPoly.constant(d, bideg, d - 1, target, projection_matrix(d, *bideg, kind, exact), exact)


def boundary_symbol(row: BoundaryRow, d: int, k: int, m: int, xi_tan: Sequence[Any], exact: bool = True) -> SymbolPoly:
    """Real symbol of a boundary row at η = ξ + t·dr as a polynomial in t.

    The first-order boundary operators are assembled from their commutator
    definitions: ambient d and δ restricted through the projections, minus
    (or plus) the face operators applied to the projections.
    """
    if d < 2:
        raise DomainError("boundary symbols need d >= 2")
    b, op = row
    xi = [Fraction(c) if exact else float(c) for c in xi_tan[: d - 1]] + [0]
    if op is not None:
        inner = interior_symbol(op, d, k, m, xi, exact)
        return boundary_symbol((b, None), d, *inner.target, xi, exact) @ inner
    src = (k, m)
    if b in ("Ptt", "Pnt", "Ptn", "Pnn"):
        return _proj(b, d, src, exact)
    half = Fraction(1, 2) if exact else 0.5
    amb = lambda o: _first_order(o, d, k, m, xi, exact)  # noqa: E731
    face = lambda o, bideg: _face_first_order(o, d, bideg, xi, exact)  # noqa: E731
    P = lambda kind, bideg: _proj(kind, d, bideg, exact)  # noqa: E731

    def ambient_then(kind: str, o: str) -> SymbolPoly:
        inner = amb(o)
        return P(kind, inner.target) @ inner

    def then_face(kind: str, o: str) -> SymbolPoly:
        p = P(kind, src)
        return face(o, p.target) @ p

    if b == "T":
        return ((ambient_then("Pnt", "d") - then_face("Pnt", "d"))
                + (ambient_then("Ptn", "d_v") - then_face("Ptn", "d_v"))) * half
    if b == "Tstar":
        return -((ambient_then("Ptn", "delta") + then_face("Ptn", "delta"))
                 + (ambient_then("Pnt", "delta_v") + then_face("Pnt", "delta_v"))) * half
    if b == "Fbstar":
        return ((ambient_then("Pnn", "d_v") - then_face("Pnn", "d_v"))
                - (ambient_then("Ptt", "delta") + then_face("Ptt", "delta"))) * half
    if b == "Fb":
        return ((ambient_then("Pnn", "d") - then_face("Pnn", "d"))
                - (ambient_then("Ptt", "delta_v") + then_face("Ptt", "delta_v"))) * half
    raise DomainError(f"unknown boundary operator {b!r}")


# --------------------------------------------------------------------------
# Symmetric subspaces

def symmetric_basis(d: int, k: int) -> np.ndarray:
    """Orthonormal basis (as columns) of the symmetric (k, k) double forms."""
    basis = fa.enumerate_basis(d, k, k)
    index = {b: n for n, b in enumerate(basis)}
    cols = []
    for n, (i, j) in enumerate(basis):
        if i == j:
            col = np.zeros(len(basis))
            col[n] = 1.0
            cols.append(col)
        elif i < j:
            col = np.zeros(len(basis))
            col[n] = col[index[fa.MultiIndexPair(j, i)]] = 1 / math.sqrt(2)
            cols.append(col)
    return np.array(cols).T if cols else np.zeros((len(basis), 0))


def symmetric_dim(d: int, k: int) -> int:
    n = math.comb(d, k) if 0 <= k <= d else 0
    return n * (n + 1) // 2


# --------------------------------------------------------------------------
# The Lopatinskij–Shapiro map

def _resolve_set(boundary_set: str | Sequence[BoundaryRow]) -> tuple[str, tuple[BoundaryRow, ...]]:
    if isinstance(boundary_set, str):
        if boundary_set not in BOUNDARY_SETS:
            raise DomainError(f"unknown boundary set {boundary_set!r}; expected one of {', '.join(BOUNDARY_SETS)}")
        return boundary_set, BOUNDARY_SETS[boundary_set]
    rows = tuple((b, op) for b, op in boundary_set)
    return "custom", rows


def _is_symmetric_set(name: str) -> bool:
    return name in SYMMETRIC_SETS


def _symmetric_rows(row: BoundaryRow, k: int) -> bool:
    """Rows of a symmetric set whose values are symmetric face forms."""
    return row[0] in ("Ptt", "Pnn", "T", "Tstar")


def _check_tangent(d: int, xi: Sequence[Any]) -> np.ndarray:
    v = np.asarray([float(c) for c in xi])
    if v.shape != (d,):
        raise DomainError(f"tangential covector needs {d} components, got {v.shape}")
    if v[-1] != 0:
        raise DomainError("ξ must be tangent to the face (no dr component)")
    if abs(np.linalg.norm(v) - 1) > 1e-12:
        raise DomainError(f"ξ must have unit norm, got {np.linalg.norm(v)}")
    return v


@dataclass
class LSSystem:
    d: int
    k: int
    m: int
    boundary_set: str
    xi: np.ndarray
    xi_matrix: np.ndarray
    row_blocks: list[tuple[str, int, int]]  # (row name, start, stop)
    symmetric: bool = False

    @property
    def n_unknowns(self) -> int:
        return self.xi_matrix.shape[1]

    def block(self, name: str) -> np.ndarray:
        for label, a, b in self.row_blocks:
            if label == name:
                return self.xi_matrix[a:b]
        raise KeyError(name)

    def singular_values(self) -> np.ndarray:
        rows, cols = self.xi_matrix.shape
        if cols == 0:
            return np.zeros(0)
        s = np.linalg.svd(self.xi_matrix, compute_uv=False) if rows else np.zeros(0)
        if rows < cols:
            s = np.concatenate([s, np.zeros(cols - rows)])
        return s

    def min_sigma(self) -> float:
        s = self.singular_values()
        return float(s.min()) if s.size else math.inf

    def rank(self, rtol: float = 1e-10) -> int:
        s = self.singular_values()
        return int(np.sum(s > rtol * max(1.0, s.max(initial=0.0))))


def _row_block(poly: SymbolPoly, order: int) -> np.ndarray:
    """Evaluate i^order Σ_j t^j R_j on (ω_0, λ_0) ↦ Σ (-i)^j R_j (ω_0 - j λ_0)."""
    rows, cols = poly.shape
    out = np.zeros((rows, 2 * cols), dtype=complex)
    for j, c in poly.coeffs.items():
        c = c.astype(float)
        phase = (-1j) ** j
        out[:, :cols] += phase * c
        out[:, cols:] += -j * phase * c
    return (1j**order) * out


def ls_system(d: int, k: int, m: int, boundary_set: str | Sequence[BoundaryRow], xi_tangential: Sequence[Any]) -> LSSystem:
    """Assemble the boundary-symbol map Ξ on the bounded solutions of the symbol ODE.

    Columns are the coordinates (ω_0, λ_0); for the symmetric sets both are
    restricted to symmetric forms and the rows with symmetric values are
    expressed in an orthonormal basis of the symmetric face forms.
    """
    if not fa.in_range(d, k, m) or d < 2:
        raise DomainError(f"bidegree ({k}, {m}) out of range for d = {d}")
    name, rows = _resolve_set(boundary_set)
    symmetric = _is_symmetric_set(name)
    if symmetric and k != m:
        raise DomainError("symmetric boundary sets need k = m")
    xi = _check_tangent(d, xi_tangential)
    blocks, labels, start = [], [], 0
    source = symmetric_basis(d, k) if symmetric else None
    for row in rows:
        poly = boundary_symbol(row, d, k, m, list(xi), exact=False)
        block = _row_block(poly, row_order(row))
        if symmetric:
            n = fa.fiber_dim(d, k, m)
            block = np.hstack([block[:, :n] @ source, block[:, n:] @ source])
            tk, tm = row_target(row, k, m)
            if _symmetric_rows(row, k) and tk == tm and _dim(d - 1, (tk, tm)):
                block = symmetric_basis(d - 1, tk).T @ block
        blocks.append(block)
        labels.append((row_name(row), start, start + block.shape[0]))
        start += block.shape[0]
    n_cols = 2 * (source.shape[1] if symmetric else fa.fiber_dim(d, k, m))
    matrix = np.vstack(blocks) if blocks else np.zeros((0, n_cols), dtype=complex)
    return LSSystem(d, k, m, name, xi, matrix, labels, symmetric)


# --------------------------------------------------------------------------
# Dimension audit

@dataclass
class DimensionAudit:
    d: int
    k: int
    m: int
    boundary_set: str
    rows: list[tuple[str, Bidegree, int]]
    total: int
    expected: int

    @property
    def matches(self) -> bool:
        return self.total == self.expected

    def to_json(self) -> dict:
        return {
            "case": {"d": self.d, "k": self.k, "m": self.m, "set": self.boundary_set},
            "rows": [{"op": n, "target": list(t), "dim": dim} for n, t, dim in self.rows],
            "total": self.total,
            "expected": self.expected,
            "matches": self.matches,
        }


def dimension_audit(d: int, k: int, m: int, boundary_set: str | Sequence[BoundaryRow]) -> DimensionAudit:
    """Target dimensions of the boundary rows against dim M⁺ = 2·dim E."""
    name, rows = _resolve_set(boundary_set)
    symmetric = _is_symmetric_set(name)
    out = []
    for row in rows:
        tk, tm = row_target(row, k, m)
        if symmetric and _symmetric_rows(row, k) and tk == tm:
            dim = symmetric_dim(d - 1, tk)
        else:
            dim = _dim(d - 1, (tk, tm))
        out.append((row_name(row), (tk, tm), dim))
    expected = 2 * (symmetric_dim(d, k) if symmetric else fa.fiber_dim(d, k, m))
    return DimensionAudit(d, k, m, name, out, sum(r[2] for r in out), expected)


# --------------------------------------------------------------------------
# Sampling and the ellipticity report

def sphere_samples(dim: int, n: int, seed: int, axes: bool = True) -> np.ndarray:
    """Deterministic unit vectors in R^dim: the ±coordinate axes followed by n
    scrambled-Sobol points pushed to the sphere through the Gaussian quantile."""
    from scipy.stats import norm, qmc

    pts = []
    if axes:
        for i in range(dim):
            for s in (1.0, -1.0):
                e = np.zeros(dim)
                e[i] = s
                pts.append(e)
    if n > 0:
        u = qmc.Sobol(dim, scramble=True, seed=seed).random(n)
        g = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
        norms = np.linalg.norm(g, axis=1)
        good = norms > 1e-12
        pts.extend(g[good] / norms[good, None])
    return np.array(pts)


def tangential_samples(d: int, n: int, seed: int) -> np.ndarray:
    pts = sphere_samples(d - 1, n, seed)
    return np.hstack([pts, np.zeros((len(pts), 1))])


@dataclass
class EllipticityReport:
    d: int
    k: int
    m: int
    boundary_set: str
    samples: int
    min_sigma: float
    min_sigma_B: float
    threshold: float
    rows: int
    cols: int
    min_rank: int
    seed: int
    failures: list[dict] = field(default_factory=list)

    @property
    def rank_deficiency(self) -> int:
        return self.cols - self.min_rank

    @property
    def passed(self) -> bool:
        return self.min_sigma >= self.threshold and self.min_sigma_B >= self.threshold and self.rank_deficiency == 0

    def to_json(self) -> dict:
        return {
            "case": {"d": self.d, "k": self.k, "m": self.m, "set": self.boundary_set},
            "samples": self.samples,
            "seed": self.seed,
            "min_sigma": self.min_sigma,
            "min_sigma_B": self.min_sigma_B,
            "threshold": self.threshold,
            "shape": [self.rows, self.cols],
            "rank_deficiency": self.rank_deficiency,
            "pass": self.passed,
            "failures": self.failures,
        }


def bilaplacian_symbol_margin(d: int, k: int, m: int, covectors: np.ndarray) -> float:
    """min over covectors of σ_min(P_B(η)) / |η|^4."""
    best = math.inf
    for eta in covectors:
        P = principal_symbol("B", d, k, m, eta, exact=False).real.astype(float)
        if P.size == 0:
            continue
        s = np.linalg.svd(P, compute_uv=False).min()
        best = min(best, s / np.linalg.norm(eta) ** 4)
    return best


def check_regular_ellipticity(
    d: int,
    k: int,
    m: int,
    boundary_set: str | Sequence[BoundaryRow],
    n_samples: int = 64,
    seed: int = 0,
    threshold: float = 1e-8,
) -> EllipticityReport:
    """Sampled Lopatinskij–Shapiro check: Ξ must be square and uniformly
    invertible over unit tangential ξ, and P_B(η) invertible for η ≠ 0."""
    if n_samples < 1:
        raise DomainError("n_samples must be at least 1")
    name, _ = _resolve_set(boundary_set)
    xis = tangential_samples(d, n_samples, seed)
    min_sigma, min_rank, failures = math.inf, None, []
    shape = (0, 0)
    for xi in xis:
        system = ls_system(d, k, m, boundary_set, xi)
        shape = system.xi_matrix.shape
        s = system.min_sigma()
        r = system.rank()
        min_sigma = min(min_sigma, s)
        min_rank = r if min_rank is None else min(min_rank, r)
        if s < threshold or r < shape[1]:
            failures.append({"xi": [float(c) for c in xi], "min_sigma": float(s), "rank": r})
    covectors = sphere_samples(d, n_samples, seed + 1)
    margin = bilaplacian_symbol_margin(d, k, m, covectors)
    return EllipticityReport(d, k, m, name, len(xis), float(min_sigma), float(margin), threshold,
                             shape[0], shape[1], int(min_rank), seed, failures[:8])


# --------------------------------------------------------------------------
# Direct assembly from the field operators

def _apply_interior(op: str, psi):
    from . import field_calculus as fc

    table = {"d": fc.d, "delta": fc.delta, "d_v": fc.d_v, "delta_v": fc.delta_v, "H": fc.H,
             "Hstar": fc.H_star, "F": fc.F, "Fstar": fc.F_star, "B": fc.bilaplacian}
    return table[op](psi)


def _apply_boundary(b: str, psi):
    from . import boundary_ops as bo

    face = bo.Face(psi.d, 0)
    table = {"Ptt": bo.P_tt, "Pnt": bo.P_nt, "Ptn": bo.P_tn, "Pnn": bo.P_nn, "T": bo.T_op,
             "Tstar": bo.T_star_op, "Fb": bo.F_op, "Fbstar": bo.F_star_op}
    return table[b](psi, face)


def assembled_symbol(row: BoundaryRow | str, d: int, k: int, m: int, xi_tan: Sequence[Any]) -> SymbolPoly:
    """Real symbol obtained by applying the field operators to polynomials.

    For a homogeneous operator of order n, applying it to (η·x)^n/n! · e_b on
    the box and reading the (constant) result gives R(η) e_b.  Doing this for
    n+1 values of t and interpolating recovers the polynomial in t exactly.
    ``row`` is a boundary row, or the name of an interior operator.
    """
    from . import field_calculus as fc

    if isinstance(row, str):
        order = OPERATOR_ORDER[row]
        target_d, target = d, tuple(a + b for a, b in zip((k, m), _SHIFT[row]))
        apply = lambda psi: _apply_interior(row, psi)  # noqa: E731
    else:
        order = row_order(row)
        target_d, target = d - 1, row_target(row, k, m)

        def apply(psi):
            if row[1] is not None:
                psi = _apply_interior(row[1], psi)
            return _apply_boundary(row[0], psi)

    domain = fc.FlatDomain(d)
    R = domain.ring
    basis = fa.enumerate_basis(d, k, m)
    rows, cols = _dim(target_d, target), len(basis)
    tgt_index = {b: n for n, b in enumerate(fa.enumerate_basis(target_d, *target))} if rows else {}
    ts = [Fraction(j) for j in range(order + 1)]
    values = []
    xi = [Fraction(c) for c in xi_tan[: d - 1]]
    for t in ts:
        eta = xi + [t]
        lin = sum((R(fc.QQ(c.numerator, c.denominator)) * x for c, x in zip(eta, R.gens)), R(0))
        poly = lin**order * fc.QQ(1, math.factorial(order))
        mat = _zeros(rows, cols, True)
        for col, b in enumerate(basis):
            psi = fc.DoubleFormField(domain, DoubleForm._raw(d, k, m, {b: poly}) if poly else DoubleForm.zero(d, k, m))
            out = apply(psi)
            for key, c in out.coeffs.items():
                if c.degree() > 0:
                    raise DomainError(f"operator {row} is not homogeneous of order {order}")
                mat[tgt_index[key], col] = Fraction(int(c.LC.numerator), int(c.LC.denominator)) if c else Fraction(0)
        values.append(mat)
    # Lagrange interpolation in t
    n = len(ts)
    V = [[t**j for j in range(n)] for t in ts]
    Vinv = _rational_inverse(V)
    coeffs = {}
    for j in range(n):
        acc = _zeros(rows, cols, True)
        for i in range(n):
            acc = acc + values[i] * Vinv[j][i]
        coeffs[j] = acc
    return SymbolPoly(d, (k, m), target_d, target, coeffs, True)


def _rational_inverse(M: list[list[Fraction]]) -> list[list[Fraction]]:
    n = len(M)
    A = [list(map(Fraction, row)) + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(M)]
    for c in range(n):
        p = next(r for r in range(c, n) if A[r][c] != 0)
        A[c], A[p] = A[p], A[c]
        piv = A[c][c]
        A[c] = [x / piv for x in A[c]]
        for r in range(n):
            if r != c and A[r][c] != 0:
                f = A[r][c]
                A[r] = [x - f * y for x, y in zip(A[r], A[c])]
    return [row[n:] for row in A]


# --------------------------------------------------------------------------
# Step-by-step elimination for the TT set

@dataclass
class ProofTrace:
    """Numerical replay of the kernel elimination for the TT boundary set.

    Residuals measure the deviation from the predicted intermediate systems:
    after the zeroth- and first-order rows the unknowns reduce to
    (ω^{nn}, λ^{nn}) with λ^{tt} = 0, i·ℙtn λ_0 = ξ∧ω^{nn} and
    i·ℙnt λ_0 = ξ^T∧ω^{nn}; the remaining rows then read
    -(R ω + 2λ) = 0 and (P + Q - 3)(ω + λ) = 0 with R = Id - P - Q,
    P = ξ∧i_ξ and Q = ξ^T∧i^V_ξ on the face.  Eliminating λ leaves
    4 Id - R², whose spectrum lies in {3, 4}.
    """

    d: int
    k: int
    m: int
    xi: np.ndarray
    zeroth_ranks: dict[str, tuple[int, int]]
    zeroth_kernel_is_nn: bool
    first_order_rank: tuple[int, int]
    lambda_nn_decoupled: float
    lambda_tt: float
    lambda_tn_residual: float
    lambda_nt_residual: float
    second_order_residual: float
    third_order_residual: float
    reduced_operator: np.ndarray
    reduced_eigenvalues: np.ndarray
    printed_form_eigenvalues: np.ndarray
    projection_norms: dict[str, float]

    @property
    def min_eigenvalue(self) -> float:
        return float(self.reduced_eigenvalues.min()) if self.reduced_eigenvalues.size else math.inf

    def passed(self, tol: float = 1e-6) -> bool:
        ranks_ok = all(r == n for r, n in self.zeroth_ranks.values())
        residuals = (self.lambda_nn_decoupled, self.lambda_tt, self.lambda_tn_residual, self.lambda_nt_residual,
                     self.second_order_residual, self.third_order_residual)
        return (
            ranks_ok
            and self.zeroth_kernel_is_nn
            and self.first_order_rank[0] == self.first_order_rank[1]
            and max(residuals) <= tol
            and self.min_eigenvalue >= 2 - tol
            and max(self.projection_norms.values()) <= 1 + tol
        )


def _opnorm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, 2)) if a.size else 0.0


def proof_trace(d: int, k: int, m: int, xi_tangential: Sequence[Any]) -> ProofTrace:
    system = ls_system(d, k, m, "TT", xi_tangential)
    xi = system.xi
    N = fa.fiber_dim(d, k, m)
    lift = {kind: projection_matrix(d, k, m, kind, exact=False).T for kind in ("Ptt", "Ptn", "Pnt", "Pnn")}
    n = lift["Pnn"].shape[1]

    zeroth_ranks = {}
    for name in ("Ptt", "Ptn", "Pnt"):
        block = system.block(name)
        zeroth_ranks[name] = (int(np.linalg.matrix_rank(block[:, :N])) if block.size else 0, block.shape[0])
    Z = np.vstack([system.block(nm) for nm in ("Ptt", "Ptn", "Pnt")])
    zeroth_kernel_is_nn = bool(
        np.abs(Z[:, N:]).max(initial=0) == 0
        and np.abs(Z[:, :N] @ lift["Pnn"]).max(initial=0) < 1e-12
        and (np.linalg.matrix_rank(Z[:, :N]) if Z.size else 0) == N - n
    )

    F = np.vstack([system.block(nm) for nm in ("T", "Fbstar", "Fb")])
    Fw, Fl = F[:, :N], F[:, N:]
    rest = np.hstack([lift["Ptt"], lift["Ptn"], lift["Pnt"]])
    G = Fl @ rest
    first_rank = (int(np.linalg.matrix_rank(G)) if G.size else 0, rest.shape[1])
    coords = -np.linalg.lstsq(G, Fw @ lift["Pnn"], rcond=None)[0] if G.size else np.zeros((0, n))
    dt, dtn = lift["Ptt"].shape[1], lift["Ptn"].shape[1]
    x = list(xi[: d - 1])
    fk, fm = k - 1, m - 1

    def face_mat(fn, kk, mm, side):
        return fn(d - 1, kk, mm, x, side, False) if fa.in_range(d - 1, kk, mm) else np.zeros((0, 0))

    wedge_f = face_mat(wedge_matrix, fk, fm, "form")
    wedge_v = face_mat(wedge_matrix, fk, fm, "vector")
    lam_tn = 1j * coords[dt : dt + dtn]
    lam_nt = 1j * coords[dt + dtn :]
    res = lambda a, b: float(np.abs(a - b).max(initial=0)) if a.size or b.size else 0.0  # noqa: E731

    top = np.vstack([system.block(nm) for nm in ("Ptt.Hstar", "T.Hstar")])
    omega_cols = np.vstack([lift["Pnn"], rest @ coords])
    lambda_cols = np.vstack([np.zeros((N, n)), lift["Pnn"]])
    M = np.hstack([top @ omega_cols, top @ lambda_cols])

    I = np.eye(n)
    if n and fk >= 1:
        P = face_mat(wedge_matrix, fk - 1, fm, "form") @ face_mat(interior_matrix, fk, fm, "form")
    else:
        P = np.zeros((n, n))
    if n and fm >= 1:
        Q = face_mat(wedge_matrix, fk, fm - 1, "vector") @ face_mat(interior_matrix, fk, fm, "vector")
    else:
        Q = np.zeros((n, n))
    R = I - P - Q
    second = res(M[:n], -np.hstack([R, 2 * I]))
    third = res(M[n:], np.hstack([P + Q - 3 * I, P + Q - 3 * I]))
    R_num = -M[:n, :n].real
    reduced = 4 * I - R_num @ R_num
    eig = np.linalg.eigvalsh((reduced + reduced.T) / 2) if n else np.zeros(0)
    printed = 4 * I + (I - P) @ (I - Q) + P @ Q
    printed_eig = np.linalg.eigvalsh((printed + printed.T) / 2) if n else np.zeros(0)
    return ProofTrace(
        d, k, m, xi, zeroth_ranks, zeroth_kernel_is_nn, first_rank,
        lambda_nn_decoupled=res(Fl @ lift["Pnn"], np.zeros_like(Fl @ lift["Pnn"])),
        lambda_tt=res(coords[:dt], np.zeros_like(coords[:dt])),
        lambda_tn_residual=res(lam_tn, wedge_f),
        lambda_nt_residual=res(lam_nt, wedge_v),
        second_order_residual=second,
        third_order_residual=third,
        reduced_operator=reduced,
        reduced_eigenvalues=eig,
        printed_form_eigenvalues=printed_eig,
        projection_norms={"xi_wedge_i": _opnorm(P), "xiT_wedge_iV": _opnorm(Q),
                          "i_xi_wedge": _opnorm(I - P), "iV_xiT_wedge": _opnorm(I - Q)},
    )


# --------------------------------------------------------------------------
# Rows that vanish identically

def apply_row(row: BoundaryRow, psi):
    """Apply a boundary row to a field, on the face x_d = 0."""
    if row[1] is not None:
        psi = _apply_interior(row[1], psi)
    return _apply_boundary(row[0], psi)


def nonvanishing_rows(
    d: int, k: int, m: int, boundary_set: str | Sequence[BoundaryRow], seed: int = 0, n_fields: int = 4, degree: int = 4
) -> dict[str, bool]:
    """Which rows of a boundary set act nontrivially on (k, m) fields.

    A row is nontrivial if its target bidegree exists on the face and it maps
    one of ``n_fields`` random polynomial fields to a nonzero face field.
    """
    import random

    from . import field_calculus as fc

    _, rows = _resolve_set(boundary_set)
    rng = random.Random(f"{seed}:{d}:{k}:{m}")
    domain = fc.FlatDomain(d)
    fields = [fc.random_field(domain, k, m, rng, degree=degree, n_terms=6) for _ in range(n_fields)]
    out = {}
    for row in rows:
        if not _dim(d - 1, row_target(row, k, m)):
            out[row_name(row)] = False
            continue
        out[row_name(row)] = any(not apply_row(row, psi).value.is_zero() for psi in fields)
    return out
