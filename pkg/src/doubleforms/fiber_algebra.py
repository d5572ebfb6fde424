"""Pointwise algebra of double forms over an oriented orthonormal fiber.

A double form of bidegree (k, m) is stored as a sparse map from basis labels
to coefficients.  Coefficients are deliberately untyped: the same code path
works for exact rationals (``Fraction``), floats, complex numbers, polynomial
ring elements and numpy arrays, as long as they support ``+``, ``-`` and
``*``.  That is what lets the field layer reuse every operator defined here.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from fractions import Fraction
from itertools import combinations
from math import comb
from typing import Any, NamedTuple

import numpy as np

Index = tuple[int, ...]


class DomainError(ValueError):
    """Raised when an operation is applied outside its mathematical domain."""


class MultiIndexPair(NamedTuple):
    form_part: Index
    vector_part: Index


def _check_index(index: Sequence[int], d: int) -> Index:
    index = tuple(int(i) for i in index)
    if any(i < 1 or i > d for i in index):
        raise DomainError(f"index {index} outside 1..{d}")
    if any(a >= b for a, b in zip(index, index[1:])):
        raise DomainError(f"index {index} is not strictly increasing")
    return index


def enumerate_basis(d: int, k: int, m: int) -> list[MultiIndexPair]:
    """Basis labels of the (k, m) fiber in lexicographic order."""
    if not (0 <= k <= d and 0 <= m <= d):
        raise DomainError(f"bidegree ({k}, {m}) outside [0, {d}]")
    axes = range(1, d + 1)
    return [MultiIndexPair(i, j) for i in combinations(axes, k) for j in combinations(axes, m)]


def fiber_dim(d: int, k: int, m: int) -> int:
    if not (0 <= k <= d and 0 <= m <= d):
        return 0
    return comb(d, k) * comb(d, m)


def in_range(d: int, k: int, m: int) -> bool:
    return 0 <= k <= d and 0 <= m <= d


def merge_sign(a: Index, b: Index) -> int:
    """Sign of the permutation sorting ``a + b``; zero when they overlap."""
    inversions = 0
    for x in a:
        for y in b:
            if x == y:
                return 0
            if x > y:
                inversions += 1
    return -1 if inversions % 2 else 1


def complement(index: Index, d: int) -> Index:
    present = set(index)
    return tuple(i for i in range(1, d + 1) if i not in present)


def is_zero(c: Any) -> bool:
    if isinstance(c, np.ndarray):
        return not np.any(c)
    return c == 0


def scale(c: Any, q: Fraction | int) -> Any:
    """Multiply a coefficient by a rational, keeping float data in float."""
    if isinstance(q, int) or q.denominator == 1:
        return c * int(q)
    if isinstance(c, (float, complex, np.ndarray, np.floating, np.complexfloating)):
        return c * float(q)
    return c * q


class DoubleForm:
    """An element of the (k, m) fiber in dimension d.

    Bidegrees outside [0, d] are allowed and denote the zero module: such a
    form never carries coefficients.
    """

    __slots__ = ("d", "k", "m", "coeffs")

    def __init__(self, d: int, k: int, m: int, coeffs: Mapping | None = None):
        self.d, self.k, self.m = int(d), int(k), int(m)
        clean: dict[MultiIndexPair, Any] = {}
        if coeffs:
            if not in_range(d, k, m):
                raise DomainError(f"bidegree ({k}, {m}) carries no coefficients in dimension {d}")
            for key, value in coeffs.items():
                form, vector = key
                key = MultiIndexPair(_check_index(form, d), _check_index(vector, d))
                if len(key.form_part) != k or len(key.vector_part) != m:
                    raise DomainError(f"label {key} does not have bidegree ({k}, {m})")
                if not is_zero(value):
                    clean[key] = value
        self.coeffs = clean

    @classmethod
    def _raw(cls, d: int, k: int, m: int, coeffs: dict) -> "DoubleForm":
        out = cls.__new__(cls)
        out.d, out.k, out.m = d, k, m
        out.coeffs = {key: c for key, c in coeffs.items() if not is_zero(c)}
        return out

    @classmethod
    def zero(cls, d: int, k: int, m: int) -> "DoubleForm":
        return cls._raw(d, k, m, {})

    @classmethod
    def basis(cls, d: int, form: Sequence[int], vector: Sequence[int], coeff: Any = 1) -> "DoubleForm":
        return cls(d, len(form), len(vector), {(tuple(form), tuple(vector)): coeff})

    @property
    def bidegree(self) -> tuple[int, int]:
        return self.k, self.m

    def is_zero(self) -> bool:
        return not self.coeffs

    def __getitem__(self, key) -> Any:
        return self.coeffs.get(MultiIndexPair(*key), 0)

    def _check_same(self, other: "DoubleForm") -> None:
        if not isinstance(other, DoubleForm):
            raise TypeError(f"expected DoubleForm, got {type(other).__name__}")
        if (self.d, self.k, self.m) != (other.d, other.k, other.m):
            raise DomainError(
                f"incompatible double forms: ({self.d}; {self.k}, {self.m}) vs ({other.d}; {other.k}, {other.m})"
            )

    def __add__(self, other: "DoubleForm") -> "DoubleForm":
        self._check_same(other)
        out = dict(self.coeffs)
        for key, c in other.coeffs.items():
            out[key] = out[key] + c if key in out else c
        return DoubleForm._raw(self.d, self.k, self.m, out)

    def __sub__(self, other: "DoubleForm") -> "DoubleForm":
        return self + (-other)

    def __neg__(self) -> "DoubleForm":
        return DoubleForm._raw(self.d, self.k, self.m, {key: -c for key, c in self.coeffs.items()})

    def __mul__(self, s: Any) -> "DoubleForm":
        if isinstance(s, DoubleForm):
            return NotImplemented
        if isinstance(s, Fraction):
            return DoubleForm._raw(self.d, self.k, self.m, {key: scale(c, s) for key, c in self.coeffs.items()})
        return DoubleForm._raw(self.d, self.k, self.m, {key: c * s for key, c in self.coeffs.items()})

    __rmul__ = __mul__

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DoubleForm):
            return NotImplemented
        if (self.d, self.k, self.m) != (other.d, other.k, other.m):
            return False
        if self.coeffs.keys() != other.coeffs.keys():
            return False
        return all(is_zero(self.coeffs[key] - other.coeffs[key]) for key in self.coeffs)

    __hash__ = None  # type: ignore[assignment]

    def map_coeffs(self, fn: Callable[[Any], Any]) -> "DoubleForm":
        return DoubleForm._raw(self.d, self.k, self.m, {key: fn(c) for key, c in self.coeffs.items()})

    def __repr__(self) -> str:
        if not self.coeffs:
            return f"DoubleForm(d={self.d}, ({self.k},{self.m}), 0)"
        terms = ", ".join(f"{list(k.form_part)}|{list(k.vector_part)}: {c}" for k, c in sorted(self.coeffs.items()))
        return f"DoubleForm(d={self.d}, ({self.k},{self.m}), {{{terms}}})"

    def to_vector(self, dtype=object) -> np.ndarray:
        """Coefficients in canonical basis order."""
        basis = enumerate_basis(self.d, self.k, self.m)
        return np.array([self.coeffs.get(b, 0) for b in basis], dtype=dtype)

    @classmethod
    def from_vector(cls, d: int, k: int, m: int, values: Iterable[Any]) -> "DoubleForm":
        basis = enumerate_basis(d, k, m)
        values = list(values)
        if len(values) != len(basis):
            raise DomainError(f"expected {len(basis)} coefficients, got {len(values)}")
        return cls._raw(d, k, m, dict(zip(basis, values)))


# --------------------------------------------------------------------------
# Serialization

def _scalar_parts(c: Any) -> tuple[str, str]:
    if isinstance(c, (int, Fraction)):
        return str(Fraction(c)), "0"
    if isinstance(c, (complex, np.complexfloating)):
        return repr(float(c.real)), repr(float(c.imag))
    if isinstance(c, (float, np.floating)):
        return repr(float(c)), "0"
    raise TypeError(f"cannot serialize coefficient of type {type(c).__name__}")


def _parse_scalar(re: str, im: str) -> Any:
    def parse(s: str):
        try:
            return Fraction(s)
        except ValueError:
            return float(s)

    real, imag = parse(re), parse(im)
    if imag == 0:
        return real
    return complex(float(real), float(imag))


def to_json(form: DoubleForm) -> dict:
    coeffs = []
    for key in enumerate_basis(form.d, form.k, form.m) if in_range(form.d, form.k, form.m) else []:
        if key in form.coeffs:
            re, im = _scalar_parts(form.coeffs[key])
            coeffs.append({"form": list(key.form_part), "vector": list(key.vector_part), "re": re, "im": im})
    return {"d": form.d, "k": form.k, "m": form.m, "coeffs": coeffs}


def from_json(data: Mapping | str) -> DoubleForm:
    if isinstance(data, str):
        data = json.loads(data)
    coeffs = {}
    for entry in data.get("coeffs", []):
        coeffs[(tuple(entry["form"]), tuple(entry["vector"]))] = _parse_scalar(
            str(entry.get("re", "0")), str(entry.get("im", "0"))
        )
    return DoubleForm(data["d"], data["k"], data["m"], coeffs)


# --------------------------------------------------------------------------
# Basic operations

def _check_side(side: str) -> str:
    if side not in ("form", "vector"):
        raise DomainError(f"side must be 'form' or 'vector', got {side!r}")
    return side


def wedge(a: DoubleForm, b: DoubleForm) -> DoubleForm:
    """(w (x) F) ^ (a (x) Q) = (w ^ a) (x) (F ^ Q), signs taken per part."""
    if a.d != b.d:
        raise DomainError(f"dimension mismatch {a.d} vs {b.d}")
    d, k, m = a.d, a.k + b.k, a.m + b.m
    if not in_range(d, k, m):
        return DoubleForm.zero(d, k, m)
    out: dict[MultiIndexPair, Any] = {}
    for (i1, j1), c1 in a.coeffs.items():
        for (i2, j2), c2 in b.coeffs.items():
            s = merge_sign(i1, i2)
            if not s:
                continue
            s *= merge_sign(j1, j2)
            if not s:
                continue
            key = MultiIndexPair(tuple(sorted(i1 + i2)), tuple(sorted(j1 + j2)))
            term = c1 * c2 if s > 0 else -(c1 * c2)
            out[key] = out[key] + term if key in out else term
    return DoubleForm._raw(d, k, m, out)


def transpose(a: DoubleForm) -> DoubleForm:
    return DoubleForm._raw(a.d, a.m, a.k, {MultiIndexPair(j, i): c for (i, j), c in a.coeffs.items()})


def inner(a: DoubleForm, b: DoubleForm) -> Any:
    """Euclidean pairing of coefficients in the orthonormal basis."""
    a._check_same(b)
    total: Any = 0
    for key, c in a.coeffs.items():
        if key in b.coeffs:
            total = total + c * b.coeffs[key]
    return total


def hodge(a: DoubleForm, side: str = "form") -> DoubleForm:
    """Hodge dual on the form part, or on the vector part through transposition."""
    _check_side(side)
    d = a.d
    if side == "vector":
        return transpose(hodge(transpose(a), "form"))
    out = {}
    for (i, j), c in a.coeffs.items():
        ic = complement(i, d)
        out[MultiIndexPair(ic, j)] = c if merge_sign(i, ic) > 0 else -c
    return DoubleForm._raw(d, d - a.k, a.m, out)


def hodge_inverse(a: DoubleForm, side: str = "form") -> DoubleForm:
    deg = a.k if side == "form" else a.m
    s = (-1) ** (a.d * deg + deg)
    return hodge(a, side) * s


def interior(x: Sequence[Any], a: DoubleForm, side: str = "form") -> DoubleForm:
    """Contraction of the vector ``x`` into the first slot of the chosen part."""
    _check_side(side)
    if len(x) != a.d:
        raise DomainError(f"vector of length {len(x)} in dimension {a.d}")
    if side == "vector":
        return transpose(interior(x, transpose(a), "form"))
    d, k, m = a.d, a.k - 1, a.m
    if not in_range(d, k, m):
        return DoubleForm.zero(d, k, m)
    out: dict[MultiIndexPair, Any] = {}
    for (i, j), c in a.coeffs.items():
        for pos, axis in enumerate(i):
            xa = x[axis - 1]
            if is_zero(xa):
                continue
            key = MultiIndexPair(i[:pos] + i[pos + 1:], j)
            term = xa * c if pos % 2 == 0 else -(xa * c)
            out[key] = out[key] + term if key in out else term
    return DoubleForm._raw(d, k, m, out)


def coordinate_vector(d: int, axis: int, coeff: Any = 1) -> list[Any]:
    return [coeff if i == axis else 0 for i in range(1, d + 1)]


def metric(d: int) -> DoubleForm:
    """The metric g = sum_i dx_i (x) dx_i as a (1, 1) form."""
    return DoubleForm(d, 1, 1, {((i,), (i,)): 1 for i in range(1, d + 1)})


def volume(d: int) -> DoubleForm:
    return DoubleForm.basis(d, tuple(range(1, d + 1)), ())


def one(d: int, coeff: Any = 1) -> DoubleForm:
    return DoubleForm.basis(d, (), (), coeff)


def is_symmetric(a: DoubleForm) -> bool:
    return a.k == a.m and transpose(a) == a


def a_operator_sign(which: str, d: int, k: int, m: int, l: int) -> int:
    """Sign in front of the Hodge conjugate defining Tr_A, i_A or i*_A.

    (k, m) is the source bidegree and l the degree of A.  The even-l terms
    keep Tr_A adjoint to A^ and i_A adjoint to i*_A; they vanish for odd l.
    """
    even = int(l % 2 == 0)
    if which == "trace":
        return (-1) ** (d * k + d * m + even * (k + m))
    if which == "i":
        return (-1) ** (d * m + d + even * m)
    if which == "i_star":
        return (-1) ** (d * k + d + even * k)
    raise DomainError(f"unknown operator {which!r}; expected trace, i or i_star")


def a_operator_family(A: DoubleForm, a: DoubleForm, which: str) -> DoubleForm:
    """The operators A^, Tr_A, i_A and i*_A built from Hodge conjugates of A^."""
    if A.k != A.m or not is_symmetric(A):
        raise DomainError("A must be a symmetric (l, l) double form")
    if A.d != a.d:
        raise DomainError(f"dimension mismatch {A.d} vs {a.d}")
    d, k, m, l = a.d, a.k, a.m, A.k
    if which == "wedge":
        return wedge(A, a)
    if which == "trace":
        if not in_range(d, k - l, m - l):
            return DoubleForm.zero(d, k - l, m - l)
        inner_part = wedge(A, hodge(hodge(a, "form"), "vector"))
        return hodge(hodge(inner_part, "form"), "vector") * a_operator_sign(which, d, k, m, l)
    if which == "i":
        if not in_range(d, k + l, m - l):
            return DoubleForm.zero(d, k + l, m - l)
        return hodge(wedge(A, hodge(a, "vector")), "vector") * a_operator_sign(which, d, k, m, l)
    if which == "i_star":
        if not in_range(d, k - l, m + l):
            return DoubleForm.zero(d, k - l, m + l)
        return hodge(wedge(A, hodge(a, "form")), "form") * a_operator_sign(which, d, k, m, l)
    raise DomainError(f"unknown operator {which!r}; expected wedge, trace, i or i_star")


def trace_g(a: DoubleForm) -> DoubleForm:
    return a_operator_family(metric(a.d), a, "trace")


def bianchi(a: DoubleForm) -> DoubleForm:
    """The Bianchi sum, i_g : (k, m) -> (k+1, m-1)."""
    return a_operator_family(metric(a.d), a, "i")


def bianchi_v(a: DoubleForm) -> DoubleForm:
    """The transposed Bianchi sum, i*_g : (k, m) -> (k-1, m+1)."""
    return a_operator_family(metric(a.d), a, "i_star")


def g_wedge(a: DoubleForm) -> DoubleForm:
    return wedge(metric(a.d), a)


def symmetrize(a: DoubleForm) -> DoubleForm:
    if a.k != a.m:
        raise DomainError(f"symmetrization needs k = m, got ({a.k}, {a.m})")
    return (a + transpose(a)) * Fraction(1, 2)


# --------------------------------------------------------------------------
# Matrices in the canonical basis

def operator_matrix(
    op: Callable[[DoubleForm], DoubleForm], d: int, k: int, m: int, dtype=object
) -> tuple[np.ndarray, tuple[int, int]]:
    """Matrix of a linear fiber operator on the (k, m) basis.

    Returns the matrix (rows indexed by the target basis) together with the
    target bidegree.  An operator landing outside [0, d] gives an empty matrix.
    """
    basis = enumerate_basis(d, k, m)
    images = [op(DoubleForm._raw(d, k, m, {b: 1})) for b in basis]
    tk, tm = (images[0].k, images[0].m) if images else (k, m)
    rows = fiber_dim(d, tk, tm)
    mat = np.zeros((rows, len(basis)), dtype=dtype)
    if rows == 0:
        return mat, (tk, tm)
    target = {b: n for n, b in enumerate(enumerate_basis(d, tk, tm))}
    for col, image in enumerate(images):
        if (image.k, image.m) != (tk, tm):
            raise DomainError("operator does not have a fixed target bidegree")
        for key, c in image.coeffs.items():
            mat[target[key], col] = c
    if dtype is object:
        mat = np.vectorize(lambda c: Fraction(c) if isinstance(c, int) else c, otypes=[object])(mat)
    return mat, (tk, tm)
