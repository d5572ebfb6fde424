"""Finite-difference double bilaplacian on flat boxes.

Each basis component ``dx^I ⊗ dx^J`` of a (k, m)-field lives on its own
staggered grid: along axis ``a`` it sits on nodes when ``a`` belongs to both
or neither of ``I`` and ``J``, and on cell centres when it belongs to exactly
one.  A first-order derivative then always moves a component between nodes and
cells, so every difference below is compact and centred.

Unknowns are stored on *extended* grids carrying one ghost layer past each
face.  All second-order operators are evaluated at physical points only, so a
centred second difference at a boundary node reads the ghost value.

The constrained bilaplacian B_R is realised variationally: the discrete
energy ``‖Hψ‖² + ‖H*ψ‖² + ‖F*ψ‖² + ‖Fψ‖²`` (tensor trapezoid/midpoint
quadrature) is minimised over fields satisfying the six first-layer boundary
conditions of the family R, imposed exactly by elimination.  The two
second-layer conditions are then the natural conditions of the minimisation.
Ghost values left free by the constraints are ordinary unknowns of the energy.
"""

from __future__ import annotations

import csv
import io
import math
import random
import sys
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache, reduce
from typing import Any

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from sympy.polys.rings import PolyElement

from . import boundary_ops as bo
from . import fiber_algebra as fa
from . import field_calculus as fc
from .fiber_algebra import DomainError, DoubleForm, MultiIndexPair
from .field_calculus import DoubleFormField, FlatDomain, ZeroOrderPlugin
from .symbol_ellipticity import BOUNDARY_SETS, FULL_SETS, row_order

NODE, CELL = 0, 1
SECOND_ORDER_OPS = ("H", "Hstar", "Fstar", "F")
_SHIFT = {"H": (1, 1), "Hstar": (-1, -1), "F": (1, -1), "Fstar": (-1, 1)}
FAMILIES = FULL_SETS
DEFAULT_TOL = 1e-8
MAX_UNKNOWNS = 20000
BH_PENALTY = 1e8
COARSE_GRID = 24
DENSE_LIMIT = 3000
KERNEL_RATIO = 1e-6


class SolverError(RuntimeError):
    """Base class for solver failures."""


class ResourceError(SolverError):
    """A desk-scale guardrail was exceeded."""


class NumericError(SolverError):
    """An iteration failed to converge or a factorisation broke down."""

    def __init__(self, message: str, history: Sequence[float] = ()):
        super().__init__(message)
        self.history = list(history)


# --------------------------------------------------------------------------
# Staggered layout

def component_types(d: int, key: MultiIndexPair) -> tuple[int, ...]:
    i, j = key
    return tuple(CELL if ((a in i) != (a in j)) else NODE for a in range(1, d + 1))


@dataclass(frozen=True)
class Layout:
    """Stacked extended and physical grids of all components of one bidegree."""

    d: int
    k: int
    m: int
    n: tuple[int, ...]
    extent: tuple[float, ...]

    @classmethod
    def of(cls, domain: FlatDomain, k: int, m: int) -> "Layout":
        if domain.kind != "box":
            raise DomainError("the solver works on boxes only")
        if domain.grid is None:
            raise DomainError("domain has no grid")
        return cls(domain.d, k, m, tuple(domain.grid), tuple(float(e) for e in domain.extent))

    @property
    def valid(self) -> bool:
        return fa.in_range(self.d, self.k, self.m)

    @cached_property
    def h(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.extent, self.n))

    @cached_property
    def basis(self) -> list[MultiIndexPair]:
        return fa.enumerate_basis(self.d, self.k, self.m) if self.valid else []

    @cached_property
    def types(self) -> list[tuple[int, ...]]:
        return [component_types(self.d, b) for b in self.basis]

    def ext_shape(self, c: int) -> tuple[int, ...]:
        return tuple(n + 3 if t == NODE else n + 2 for n, t in zip(self.n, self.types[c]))

    def phys_shape(self, c: int) -> tuple[int, ...]:
        return tuple(n + 1 if t == NODE else n for n, t in zip(self.n, self.types[c]))

    @cached_property
    def ext_starts(self) -> list[int]:
        return list(np.cumsum([0] + [math.prod(self.ext_shape(c)) for c in range(len(self.basis))]))

    @cached_property
    def phys_starts(self) -> list[int]:
        return list(np.cumsum([0] + [math.prod(self.phys_shape(c)) for c in range(len(self.basis))]))

    @property
    def n_ext(self) -> int:
        return int(self.ext_starts[-1])

    @property
    def n_phys(self) -> int:
        return int(self.phys_starts[-1])

    def axis_coords(self, c: int, axis: int, ext: bool) -> np.ndarray:
        n, h, t = self.n[axis], self.h[axis], self.types[c][axis]
        if t == NODE:
            return (np.arange(-1, n + 2) if ext else np.arange(n + 1)) * h
        return (np.arange(-1, n + 1) + 0.5 if ext else np.arange(n) + 0.5) * h

    def coords(self, c: int, ext: bool) -> list[np.ndarray]:
        axes = [self.axis_coords(c, a, ext) for a in range(self.d)]
        return list(np.meshgrid(*axes, indexing="ij"))

    @cached_property
    def ghost_mask(self) -> np.ndarray:
        """True on extended unknowns lying outside the closed box."""
        out = np.zeros(self.n_ext, dtype=bool)
        for c in range(len(self.basis)):
            masks = []
            for a in range(self.d):
                x = self.axis_coords(c, a, True)
                masks.append((x < -1e-12) | (x > self.extent[a] + 1e-12))
            g = reduce(np.logical_or, np.meshgrid(*masks, indexing="ij"))
            out[self.ext_starts[c]:self.ext_starts[c + 1]] = g.ravel()
        return out

    @cached_property
    def weights(self) -> np.ndarray:
        """Physical quadrature weights: trapezoid on nodes, midpoint on cells."""
        out = [_grid_weights(self.n, self.h, t) for t in self.types]
        return np.concatenate(out) if out else np.zeros(0)

    @cached_property
    def restriction(self) -> sp.csr_matrix:
        """Extended to physical values."""
        return self._blockdiag(lambda c, a: _factor(self.n[a], self.h[a], self.types[c][a], 0, self.types[c][a]))

    @cached_property
    def extension(self) -> sp.csr_matrix:
        """Physical to extended values, ghosts by cubic extrapolation."""
        return self._blockdiag(lambda c, a: _extension(self.n[a], self.types[c][a]))

    def _blockdiag(self, factor) -> sp.csr_matrix:
        if not self.basis:
            return sp.csr_matrix((0, 0))
        blocks = [_kron([factor(c, a) for a in range(self.d)]) for c in range(len(self.basis))]
        return sp.block_diag(blocks, format="csr")

    def transpose_permutation(self, ext: bool) -> np.ndarray:
        """Index map taking the stacked vector of ψ to that of ψ^T on the (m, k) layout."""
        other = Layout(self.d, self.m, self.k, self.n, self.extent)
        starts = self.ext_starts if ext else self.phys_starts
        o_starts = other.ext_starts if ext else other.phys_starts
        perm = np.zeros(self.n_ext if ext else self.n_phys, dtype=int)
        index = {b: c for c, b in enumerate(other.basis)}
        for c, (i, j) in enumerate(self.basis):
            oc = index[MultiIndexPair(j, i)]
            perm[o_starts[oc]:o_starts[oc + 1]] = np.arange(starts[c], starts[c + 1])
        return perm

    def sample(self, psi: DoubleFormField | Mapping | Callable, ext: bool = True) -> np.ndarray:
        """Evaluate a polynomial field, or callables per basis key, on the grids."""
        starts = self.ext_starts if ext else self.phys_starts
        out = np.zeros(starts[-1])
        if isinstance(psi, DoubleFormField):
            if (psi.d, psi.k, psi.m) != (self.d, self.k, self.m):
                raise DomainError(f"field has bidegree {(psi.k, psi.m)} in dimension {psi.d}, layout expects {(self.k, self.m)} in {self.d}")
            coeffs = psi.coeffs
        elif callable(psi):
            coeffs = {b: (lambda *X, b=b: psi(b, *X)) for b in self.basis}
        else:
            coeffs = {MultiIndexPair(tuple(i), tuple(j)): f for (i, j), f in psi.items()}
        for c, b in enumerate(self.basis):
            if b not in coeffs:
                continue
            X = self.coords(c, ext)
            out[starts[c]:starts[c + 1]] = _evaluate(coeffs[b], X).ravel()
        return out

    def to_json(self) -> dict:
        return {"d": self.d, "k": self.k, "m": self.m, "grid": list(self.n), "extent": list(self.extent)}


def _evaluate(c: Any, X: list[np.ndarray]) -> np.ndarray:
    if isinstance(c, PolyElement):
        out = np.zeros(X[0].shape)
        for exps, coef in c.terms():
            term = np.full(X[0].shape, float(coef))
            for x, e in zip(X, exps):
                if e:
                    term = term * x**e
            out += term
        return out
    if callable(c):
        return np.broadcast_to(np.asarray(c(*X), dtype=float), X[0].shape).copy()
    return np.full(X[0].shape, float(c))


@dataclass
class DiscreteField:
    """Values of a (k, m)-field at the physical points of a layout, with
    optional ghost values."""

    layout: Layout
    values: np.ndarray
    ext: np.ndarray | None = None

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.layout.weights, self.values**2)))

    def inner(self, other: "DiscreteField") -> float:
        return float(np.dot(self.layout.weights * self.values, other.values))

    def component(self, key) -> np.ndarray:
        key = MultiIndexPair(tuple(key[0]), tuple(key[1]))
        c = self.layout.basis.index(key)
        s = self.layout.phys_starts
        return self.values[s[c]:s[c + 1]].reshape(self.layout.phys_shape(c))

    def transpose(self) -> "DiscreteField":
        lay = self.layout
        other = Layout(lay.d, lay.m, lay.k, lay.n, lay.extent)
        vals = self.values[lay.transpose_permutation(False)]
        ext = None if self.ext is None else self.ext[lay.transpose_permutation(True)]
        return DiscreteField(other, vals, ext)

    def __add__(self, other: "DiscreteField") -> "DiscreteField":
        return DiscreteField(self.layout, self.values + other.values)

    def __sub__(self, other: "DiscreteField") -> "DiscreteField":
        return DiscreteField(self.layout, self.values - other.values)

    def __mul__(self, s: float) -> "DiscreteField":
        return DiscreteField(self.layout, self.values * s, None if self.ext is None else self.ext * s)

    __rmul__ = __mul__

    def to_json(self) -> dict:
        comps = []
        for c, (i, j) in enumerate(self.layout.basis):
            s = self.layout.phys_starts
            comps.append({"form": list(i), "vector": list(j), "shape": list(self.layout.phys_shape(c)),
                          "values": self.values[s[c]:s[c + 1]].tolist()})
        return {"layout": self.layout.to_json(), "components": comps}


def as_discrete(layout: Layout, psi: Any) -> DiscreteField:
    if isinstance(psi, DiscreteField):
        if psi.layout != layout:
            raise DomainError("field is defined on a different layout")
        return psi
    if isinstance(psi, np.ndarray):
        if psi.shape == (layout.n_phys,):
            return DiscreteField(layout, psi.astype(float))
        if psi.shape == (layout.n_ext,):
            return DiscreteField(layout, layout.restriction @ psi, psi.astype(float))
        raise DomainError(f"vector of length {psi.shape} matches neither grid of the layout")
    ext = layout.sample(psi, ext=True)
    return DiscreteField(layout, layout.restriction @ ext, ext)


# --------------------------------------------------------------------------
# One-dimensional factors

def _kron(mats: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), mats, sp.csr_matrix(np.ones((1, 1))))


@lru_cache(maxsize=None)
def _factor(n: int, h: float, src: int, nder: int, tgt: int) -> sp.csr_matrix:
    """Extended-to-physical 1-D factor with ``nder`` derivatives."""
    if (src != tgt) != (nder % 2 == 1):
        raise DomainError("inconsistent stagger: derivative count does not match grid types")
    n_src = n + 3 if src == NODE else n + 2
    n_tgt = n + 1 if tgt == NODE else n
    rows, cols, vals = [], [], []

    def put(i, js, vs):
        rows.extend([i] * len(js))
        cols.extend(js)
        vals.extend(vs)

    for i in range(n_tgt):
        if nder == 0 and src == tgt:
            put(i, [i + 1], [1.0])
        elif nder == 0 and src == NODE:
            put(i, [i + 1, i + 2], [0.5, 0.5])
        elif nder == 0:
            put(i, [i, i + 1], [0.5, 0.5])
        elif nder == 1 and src == NODE:
            put(i, [i + 1, i + 2], [-1 / h, 1 / h])
        elif nder == 1:
            put(i, [i, i + 1], [-1 / h, 1 / h])
        elif nder == 2:
            put(i, [i, i + 1, i + 2], [1 / h**2, -2 / h**2, 1 / h**2])
        else:
            raise DomainError("at most two derivatives per axis")
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_tgt, n_src))


@lru_cache(maxsize=None)
def _face_factor(n: int, h: float, src: int, nder: int, side: int) -> sp.csr_matrix:
    """Value or normal derivative at the face, as a row on the extended axis."""
    size = n + 3 if src == NODE else n + 2
    row = np.zeros(size)
    if src == NODE:
        i = 1 if side == 0 else n + 1
        if nder == 0:
            row[i] = 1
        else:
            row[i - 1], row[i + 1] = -1 / (2 * h), 1 / (2 * h)
    else:
        i = 0 if side == 0 else n
        if nder == 0:
            row[i] = row[i + 1] = 0.5
        else:
            row[i], row[i + 1] = -1 / h, 1 / h
    if nder > 1:
        raise DomainError("face conditions are at most first order")
    return sp.csr_matrix(row[None, :])


@lru_cache(maxsize=None)
def _extension(n: int, t: int) -> sp.csr_matrix:
    size = n + 1 if t == NODE else n
    E = sp.lil_matrix((size + 2, size))
    for i in range(size):
        E[i + 1, i] = 1
    E[0, 0:4] = [4, -6, 4, -1]
    E[size + 1, size - 4:size] = [-1, 4, -6, 4]
    return E.tocsr()


# --------------------------------------------------------------------------
# Stencils read off the exact field calculus

def _ground(c: Any) -> Fraction:
    if isinstance(c, PolyElement):
        if not c.is_ground:
            raise DomainError("probe produced a non-constant coefficient")
        c = c.coeff(1) if c else 0
    return Fraction(int(c.numerator), int(c.denominator)) if hasattr(c, "numerator") else Fraction(c)


def _probe(apply: Callable[[DoubleFormField], DoubleFormField], d: int, k: int, m: int,
           target_d: int, target: tuple[int, int], order: int) -> dict[tuple[int, ...], np.ndarray]:
    """Coefficient matrices of a constant-coefficient operator of exact order.

    The key lists the differentiated axes (sorted, 0-based); applying the
    operator to the monomial ∏ x_a / (multiplicities)! isolates its coefficient.
    """
    domain = FlatDomain(d)
    R = domain.ring
    src = fa.enumerate_basis(d, k, m)
    tgt = fa.enumerate_basis(target_d, *target) if fa.in_range(target_d, *target) else []
    index = {b: r for r, b in enumerate(tgt)}
    out: dict[tuple[int, ...], np.ndarray] = {}
    keys = [()] if order == 0 else [(a,) for a in range(d)] if order == 1 else [(a, b) for a in range(d) for b in range(a, d)]
    for key in keys:
        poly = R(1)
        for a in key:
            poly = poly * R.gens[a]
        if len(key) == 2 and key[0] == key[1]:
            poly = poly * fc.QQ(1, 2)
        mat = np.zeros((len(tgt), len(src)))
        for col, b in enumerate(src):
            res = apply(DoubleFormField(domain, DoubleForm._raw(d, k, m, {b: poly})))
            for kk, c in res.coeffs.items():
                mat[index[kk], col] = float(_ground(c))
        if np.any(mat):
            out[key] = mat
    return out


@lru_cache(maxsize=None)
def interior_stencil(op: str, d: int, k: int, m: int) -> dict[tuple[int, ...], np.ndarray]:
    """Second-derivative coefficients of H, H*, F*, F on flat space."""
    sk, sm = _SHIFT[op]
    return _probe(lambda p: fc.second_order(p, op), d, k, m, d, (k + sk, m + sm), 2)


def plugin_stencil(op: str, plugin: ZeroOrderPlugin, k: int, m: int) -> np.ndarray | None:
    sk, sm = _SHIFT[op]
    d = plugin.d
    if not fa.in_range(d, k + sk, m + sm):
        return None
    res = _probe(lambda p: plugin.apply(op, p), d, k, m, d, (k + sk, m + sm), 0)
    return res.get(())


@lru_cache(maxsize=None)
def boundary_stencil(row: str, d: int, k: int, m: int, axis: int, side: int) -> tuple[tuple[int, int], dict]:
    """Coefficients of a boundary row on the face x_axis = side·L (axis 1-based).

    Returns the face bidegree and a dict from differentiated axes to matrices
    (face components × source components).
    """
    from .symbol_ellipticity import row_target

    face = bo.Face(axis, side)
    table = {"Ptt": bo.P_tt, "Pnt": bo.P_nt, "Ptn": bo.P_tn, "Pnn": bo.P_nn, "T": bo.T_op,
             "Tstar": bo.T_star_op, "Fb": bo.F_op, "Fbstar": bo.F_star_op}
    target = row_target((row, None), k, m)
    order = row_order((row, None))
    return target, _probe(lambda p: table[row](p, face), d, k, m, d - 1, target, order)


def _face_key_types(d: int, axis: int, key: MultiIndexPair) -> tuple[int, ...]:
    """Grid types along the tangential axes of a face component."""
    tang = [a for a in range(1, d + 1) if a != axis]
    i = tuple(tang[x - 1] for x in key[0])
    j = tuple(tang[x - 1] for x in key[1])
    full = component_types(d, MultiIndexPair(i, j))
    return tuple(full[a - 1] for a in tang)


# --------------------------------------------------------------------------
# Grid operators

@dataclass
class GridOperator:
    """Sparse matrix from the extended grids of one bidegree to the physical
    grids of another."""

    name: str
    matrix: sp.csr_matrix
    source: Layout
    target: Layout
    stencil_order: int = 2

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def __call__(self, psi: DiscreteField | np.ndarray) -> DiscreteField:
        if isinstance(psi, DiscreteField):
            vec = psi.ext if psi.ext is not None else self.source.extension @ psi.values
        else:
            vec = psi
        return DiscreteField(self.target, self.matrix @ vec)


def _assemble_op(op: str, src: Layout, plugin: ZeroOrderPlugin | None) -> GridOperator:
    sk, sm = _SHIFT[op]
    tgt = Layout(src.d, src.k + sk, src.m + sm, src.n, src.extent)
    if not (src.valid and tgt.valid):
        return GridOperator(op, sp.csr_matrix((tgt.n_phys, src.n_ext)), src, tgt)
    d = src.d
    stencil = dict(interior_stencil(op, d, src.k, src.m))
    if plugin is not None:
        zero = plugin_stencil(op, plugin, src.k, src.m)
        if zero is not None and np.any(zero):
            stencil[()] = zero
    blocks = [[None] * len(src.basis) for _ in tgt.basis]
    for key, mat in stencil.items():
        counts = [key.count(a) for a in range(d)]
        for r, c in zip(*np.nonzero(mat)):
            mats = [_factor(src.n[a], src.h[a], src.types[c][a], counts[a], tgt.types[r][a]) for a in range(d)]
            term = mat[r, c] * _kron(mats)
            blocks[r][c] = term if blocks[r][c] is None else blocks[r][c] + term
    for r in range(len(tgt.basis)):
        for c in range(len(src.basis)):
            if blocks[r][c] is None:
                blocks[r][c] = sp.csr_matrix((math.prod(tgt.phys_shape(r)), math.prod(src.ext_shape(c))))
    return GridOperator(op, sp.bmat(blocks, format="csr"), src, tgt)


@dataclass
class Assembly:
    """H, H*, F*, F from one bidegree, the operators into it used by B, and
    the energy matrix."""

    layout: Layout
    ops: dict[str, GridOperator]
    into: dict[str, GridOperator]
    plugin: ZeroOrderPlugin | None = None

    @cached_property
    def stacked(self) -> sp.csr_matrix:
        """D_R ψ = (Hψ, H*ψ, F*ψ, Fψ) as one matrix."""
        mats = [self.ops[o].matrix for o in SECOND_ORDER_OPS if self.ops[o].matrix.shape[0]]
        return sp.vstack(mats, format="csr") if mats else sp.csr_matrix((0, self.layout.n_ext))

    @cached_property
    def stacked_weights(self) -> np.ndarray:
        ws = [self.ops[o].target.weights for o in SECOND_ORDER_OPS if self.ops[o].matrix.shape[0]]
        return np.concatenate(ws) if ws else np.zeros(0)

    @cached_property
    def energy(self) -> sp.csr_matrix:
        D = self.stacked
        return (D.T @ sp.diags(self.stacked_weights) @ D).tocsr()

    @cached_property
    def B(self) -> sp.csr_matrix:
        """Strong-form B = H H* + H* H + F* F + F F* (physical to physical,
        intermediate ghosts extrapolated)."""
        lay = self.layout
        total = sp.csr_matrix((lay.n_phys, lay.n_phys))
        pairs = (("H", "Hstar"), ("Hstar", "H"), ("Fstar", "F"), ("F", "Fstar"))
        for outer, inner in pairs:
            first = self.ops[inner]
            if first.matrix.shape[0] == 0:
                continue
            second = self.into[outer]
            total = total + second.matrix @ first.target.extension @ first.matrix @ lay.extension
        return total.tocsr()

    def B_factors(self) -> list[tuple[GridOperator, GridOperator]]:
        pairs = (("H", "Hstar"), ("Hstar", "H"), ("Fstar", "F"), ("F", "Fstar"))
        return [(self.into[o], self.ops[i]) for o, i in pairs]

    def apply(self, op: str, psi: DiscreteField) -> DiscreteField:
        return self.ops[op](psi)


_INVERSE = {"H": "Hstar", "Hstar": "H", "F": "Fstar", "Fstar": "F"}


def assemble(domain: FlatDomain, k: int, m: int, plugin: ZeroOrderPlugin | None = None,
             max_unknowns: int = MAX_UNKNOWNS) -> Assembly:
    """Grid operators H, H*, F*, F out of (k, m), their partners into (k, m), and B."""
    lay = Layout.of(domain, k, m)
    if not lay.valid:
        raise DomainError(f"bidegree {(k, m)} out of range for d={domain.d}")
    if min(lay.n) < 8:
        raise DomainError("fourth-order solves need at least 8 intervals per axis")
    if lay.n_ext > max_unknowns:
        raise ResourceError(f"{lay.n_ext} unknowns exceed the guardrail of {max_unknowns}")
    if plugin is not None and plugin.d != lay.d:
        raise DomainError("plugin dimension does not match the domain")
    ops = {o: _assemble_op(o, lay, plugin) for o in SECOND_ORDER_OPS}
    into = {}
    for o in SECOND_ORDER_OPS:
        sk, sm = _SHIFT[_INVERSE[o]]
        src = Layout(lay.d, k + sk, m + sm, lay.n, lay.extent)
        into[o] = _assemble_op(o, src, plugin)
    return Assembly(lay, ops, into, plugin)


# --------------------------------------------------------------------------
# Boundary constraints

def first_layer_rows(family: str) -> list[str]:
    """The six zeroth- and first-order boundary rows defining H²_R."""
    if family not in BOUNDARY_SETS:
        raise DomainError(f"unknown boundary family {family!r}")
    return [b for b, inner in BOUNDARY_SETS[family] if inner is None]


def second_layer_rows(family: str) -> list[tuple[str, str]]:
    return [(b, inner) for b, inner in BOUNDARY_SETS[family] if inner is not None]


@dataclass
class ConstraintSet:
    """Discrete first-layer conditions of one family on every face.

    ``labels[i]`` names the face, row, face component and tangential point of
    ``matrix[i]``.  The second-layer rows are recorded for reference; the
    variational solve imposes them naturally.
    """

    family: str
    layout: Layout
    rows: list[str]
    matrix: sp.csr_matrix
    labels: list[tuple]
    natural_rows: list[tuple[str, str]]

    def residual(self, ext: np.ndarray, data: np.ndarray | None = None) -> float:
        r = self.matrix @ ext
        if data is not None:
            r = r - data
        return float(np.max(np.abs(r))) if r.size else 0.0


def _face_rows(lay: Layout, row: str, axis: int, side: int) -> tuple[sp.csr_matrix, list[tuple]]:
    d = lay.d
    target, stencil = boundary_stencil(row, d, lay.k, lay.m, axis, side)
    if not stencil:
        return sp.csr_matrix((0, lay.n_ext)), []
    face_basis = fa.enumerate_basis(d - 1, *target)
    tang = [a for a in range(d) if a != axis - 1]
    blocks, labels = [], []
    for r, fkey in enumerate(face_basis):
        ftypes = _face_key_types(d, axis, fkey)
        sizes = [lay.n[a] + 1 if t == NODE else lay.n[a] for a, t in zip(tang, ftypes)]
        n_rows = math.prod(sizes)
        row_blocks = []
        any_entry = False
        for c in range(len(lay.basis)):
            acc = None
            for key, mat in stencil.items():
                coef = mat[r, c]
                if coef == 0:
                    continue
                counts = [key.count(a) for a in range(d)]
                mats = []
                for a in range(d):
                    st = lay.types[c][a]
                    if a == axis - 1:
                        mats.append(_face_factor(lay.n[a], lay.h[a], st, counts[a], side))
                    else:
                        tt = ftypes[tang.index(a)]
                        mats.append(_factor(lay.n[a], lay.h[a], st, counts[a], tt))
                term = coef * _kron(mats)
                acc = term if acc is None else acc + term
            if acc is None:
                acc = sp.csr_matrix((n_rows, math.prod(lay.ext_shape(c))))
            else:
                any_entry = True
            row_blocks.append(acc)
        if not any_entry:
            continue
        blocks.append(sp.hstack(row_blocks, format="csr"))
        for p in np.ndindex(*sizes):
            labels.append((axis, side, row, fkey, p))
    if not blocks:
        return sp.csr_matrix((0, lay.n_ext)), []
    return sp.vstack(blocks, format="csr"), labels


def constraints(lay: Layout, family: str) -> ConstraintSet:
    """First-layer rows of ``family`` on all faces (zeroth-order rows first)."""
    rows = first_layer_rows(family) if family != "free" else []
    ordered = sorted(rows, key=lambda b: row_order((b, None)))
    mats, labels = [], []
    for row in ordered:
        for axis in range(1, lay.d + 1):
            for side in (0, 1):
                mat, lab = _face_rows(lay, row, axis, side)
                if mat.shape[0]:
                    mats.append(mat)
                    labels.extend(lab)
    matrix = sp.vstack(mats, format="csr") if mats else sp.csr_matrix((0, lay.n_ext))
    natural = second_layer_rows(family) if family != "free" else []
    return ConstraintSet(family, lay, rows, matrix, labels, natural)


@dataclass
class Elimination:
    """Parametrisation u = u0 + Z x of the discrete constraint set.

    ``pivots`` are eliminated unknowns; dependent constraint rows (edges and
    corners where two faces meet) are dropped and counted.
    """

    Z: sp.csr_matrix
    free: np.ndarray
    pivots: np.ndarray
    dropped: int
    pinned: int
    _exprs: dict = field(repr=False, default_factory=dict)
    _rhs_rows: list = field(repr=False, default_factory=list)

    def particular(self, data: np.ndarray | None, n_ext: int) -> np.ndarray:
        """Extended vector satisfying C u = data with every free unknown zero."""
        u = np.zeros(n_ext)
        if data is None or not np.any(data):
            return u
        consts: dict[int, float] = {}
        for p, (terms, rhs_terms) in self._exprs.items():
            consts[p] = sum(c * data[r] for r, c in rhs_terms.items())
        for p, v in consts.items():
            u[p] = v
        return u


def eliminate(C: sp.csr_matrix, n_ext: int, ghost: np.ndarray, referenced: np.ndarray,
              tol: float = 1e-10) -> Elimination:
    """Greedy sparse Gaussian elimination preferring ghost pivots."""
    exprs: dict[int, tuple[dict[int, float], dict[int, float]]] = {}
    users: dict[int, set[int]] = {}
    dropped = 0
    pinned_set = set(np.flatnonzero(~referenced).tolist())
    for p in pinned_set:
        exprs[p] = ({}, {})
    C = C.tocsr()
    for r in range(C.shape[0]):
        lo, hi = C.indptr[r], C.indptr[r + 1]
        terms: dict[int, float] = {}
        rhs: dict[int, float] = {r: 1.0}
        for j, v in zip(C.indices[lo:hi], C.data[lo:hi]):
            if j in exprs:
                sub, srhs = exprs[j]
                for jj, vv in sub.items():
                    terms[jj] = terms.get(jj, 0.0) + v * vv
                for rr, vv in srhs.items():
                    rhs[rr] = rhs.get(rr, 0.0) - v * vv
            else:
                terms[j] = terms.get(j, 0.0) + v
        scale = max((abs(v) for v in terms.values()), default=0.0)
        terms = {j: v for j, v in terms.items() if abs(v) > tol * max(scale, 1.0) and abs(v) > 1e-14}
        if not terms:
            dropped += 1
            continue
        scale = max(abs(v) for v in terms.values())
        cands = [j for j, v in terms.items() if abs(v) >= 0.5 * scale]
        ghosts = [j for j in cands if ghost[j]]
        pick = max(ghosts or cands, key=lambda j: (abs(terms[j]), -j))
        cp = terms.pop(pick)
        expr = {j: -v / cp for j, v in terms.items()}
        erhs = {rr: vv / cp for rr, vv in rhs.items()}
        # substitute into earlier pivots that used ``pick`` as a free unknown
        for q in users.pop(pick, set()):
            qexpr, qrhs = exprs[q]
            w = qexpr.pop(pick)
            for j, v in expr.items():
                qexpr[j] = qexpr.get(j, 0.0) + w * v
                users.setdefault(j, set()).add(q)
            for rr, vv in erhs.items():
                qrhs[rr] = qrhs.get(rr, 0.0) + w * vv
        exprs[pick] = (expr, erhs)
        for j in expr:
            users.setdefault(j, set()).add(pick)
    pivots = np.array(sorted(exprs), dtype=int)
    is_pivot = np.zeros(n_ext, dtype=bool)
    is_pivot[pivots] = True
    free = np.flatnonzero(~is_pivot)
    col = -np.ones(n_ext, dtype=int)
    col[free] = np.arange(len(free))
    rows, cols, vals = list(free), list(range(len(free))), [1.0] * len(free)
    for p, (expr, _) in exprs.items():
        for j, v in expr.items():
            if abs(v) > 1e-15:
                rows.append(p)
                cols.append(col[j])
                vals.append(v)
    Z = sp.csr_matrix((vals, (rows, cols)), shape=(n_ext, len(free)))
    return Elimination(Z, free, pivots, dropped, len(pinned_set), exprs)


# --------------------------------------------------------------------------
# Constrained systems, kernels and Green operators

@dataclass
class KernelReport:
    """Discrete BH_R: eigenvalues of K x = λ M x below the spectral-gap threshold."""

    family: str
    layout: Layout
    dimension: int
    eigenvalues: np.ndarray
    threshold: float
    scale: float
    method: str
    inconclusive: bool
    basis: list[DiscreteField] = field(repr=False, default_factory=list)

    def to_json(self) -> dict:
        return {"family": self.family, "bidegree": [self.layout.k, self.layout.m], "grid": list(self.layout.n),
                "dimension": self.dimension, "threshold": self.threshold, "scale": self.scale,
                "smallest_eigenvalues": [float(v) for v in self.eigenvalues[: max(self.dimension + 4, 6)]],
                "method": self.method, "inconclusive": self.inconclusive}


@dataclass
class SolveResult:
    psi: DiscreteField
    family: str
    residual: float
    history: list[float]
    kernel_dimension: int
    projection_removed: float
    iterations: int
    method: str
    constraint_residual: float

    def to_json(self, include_field: bool = False) -> dict:
        out = {"family": self.family, "residual": self.residual, "residual_history": self.history,
               "kernel_dimension": self.kernel_dimension, "projection_removed": self.projection_removed,
               "iterations": self.iterations, "method": self.method,
               "constraint_residual": self.constraint_residual, "norm": self.psi.norm()}
        if include_field:
            out["field"] = self.psi.to_json()
        return out


class FamilySystem:
    """Reduced energy system of one boundary family on one layout.

    Holds K = Zᵀ A Z, the mass matrix M = (RZ)ᵀ W (RZ), the discrete kernel and
    a factorisation reused across right-hand sides.
    """

    def __init__(self, assembly: Assembly, family: str):
        if family not in BOUNDARY_SETS and family != "free":
            raise DomainError(f"unknown boundary family {family!r}")
        self.assembly = assembly
        self.family = family
        lay = self.layout = assembly.layout
        self.constraints = constraints(lay, family)
        D = assembly.stacked
        referenced = np.asarray(abs(D).sum(axis=0)).ravel() > 0
        referenced |= np.asarray(abs(self.constraints.matrix).sum(axis=0)).ravel() > 0
        self.elim = eliminate(self.constraints.matrix, lay.n_ext, lay.ghost_mask, referenced)
        Z = self.elim.Z
        self.RZ = (lay.restriction @ Z).tocsr()
        self.K = (Z.T @ assembly.energy @ Z).tocsr()
        self.M = (self.RZ.T @ sp.diags(lay.weights) @ self.RZ).tocsr()
        self.massless = np.asarray(abs(self.RZ).sum(axis=0)).ravel() == 0
        self._kernel: KernelReport | None = None
        self._lu = None

    @property
    def size(self) -> int:
        return self.K.shape[0]

    # -- kernel ------------------------------------------------------------

    def kernel(self, threshold: float | None = None, dense_limit: int = DENSE_LIMIT,
               max_unknowns: int = MAX_UNKNOWNS) -> KernelReport:
        """Kernel by the spectral-gap rule.

        The cut is 1e-6 × the median eigenvalue on grids up to COARSE_GRID; finer
        grids reuse the cut of the same problem on that coarse grid unless
        ``threshold`` is given.
        """
        if self._kernel is None or (threshold is not None and threshold != self._kernel.threshold):
            if self.size > max_unknowns:
                raise ResourceError(f"kernel computation on {self.size} unknowns exceeds the guardrail of {max_unknowns}")
            self._lu = None
            if threshold is None:
                # the median grows like h^-4 while the gap does not: carry the coarse cut
                coarse = self._coarse_report()
                threshold = coarse.threshold if coarse is not None else None
            if self.size <= dense_limit:
                self._kernel = self._dense_kernel(threshold)
            else:
                self._kernel = self._sparse_kernel(threshold)
        return self._kernel

    def _condense_dense(self):
        g = self.massless
        p = ~g
        K = self.K.toarray()
        Kpp, Kpg, Kgg = K[np.ix_(p, p)], K[np.ix_(p, g)], K[np.ix_(g, g)]
        X = np.linalg.lstsq(Kgg, Kpg.T, rcond=1e-13)[0] if g.any() else np.zeros((0, p.sum()))
        Kc = Kpp - Kpg @ X
        return 0.5 * (Kc + Kc.T), X

    def _lift(self, xp: np.ndarray, X: np.ndarray | None = None) -> np.ndarray:
        """Reduced vector from its massive part, massless part by condensation."""
        x = np.zeros(self.size)
        p, g = ~self.massless, self.massless
        x[p] = xp
        if g.any():
            if X is not None:
                x[g] = -X @ xp
            else:
                Kgg = (self.K[g][:, g] + sp.identity(int(g.sum())) * self._pin_shift()).tocsc()
                x[g] = -spla.spsolve(Kgg, self.K[g][:, p] @ xp)
        return x

    def _finish_kernel(self, vals, vecs, X, scale, method, threshold) -> KernelReport:
        tau = KERNEL_RATIO * scale if threshold is None else threshold
        dim = int(np.sum(vals < tau))
        inconclusive = bool(np.any((vals >= tau * 1e-2) & (vals <= tau * 10)))
        if method == "shift-invert" and dim == len(vals):
            inconclusive = True
        basis = []
        for i in range(dim):
            x = self._lift(vecs[:, i], X)
            basis.append(self._field(x))
        basis = _w_orthonormalize(basis)
        return KernelReport(self.family, self.layout, dim, vals, tau, scale, method, inconclusive, basis)

    def _dense_kernel(self, threshold: float | None) -> KernelReport:
        Kc, X = self._condense_dense()
        p = ~self.massless
        Mp = self.M[p][:, p].toarray()
        vals, vecs = sla.eigh(Kc, Mp)
        positive = vals[vals > 1e-12 * max(abs(vals[-1]), 1e-300)]
        scale = float(np.median(positive)) if positive.size else 1.0
        return self._finish_kernel(vals, vecs, X, scale, "dense", threshold)

    def _pin_shift(self) -> float:
        return 1e-12 * float(np.abs(self.K.diagonal()).max() or 1.0)

    def _coarse_report(self) -> KernelReport | None:
        """Dense kernel of the same problem on the coarse grid, or None if this is coarse."""
        lay = self.layout
        if max(lay.n) <= COARSE_GRID:
            return None
        for nc in (COARSE_GRID, 16, 12, 8):
            grid = tuple(max(8, round(n * nc / max(lay.n))) for n in lay.n)
            dom = FlatDomain(lay.d, "box", lay.extent, grid)
            coarse = FamilySystem(assemble(dom, lay.k, lay.m, self.assembly.plugin), self.family)
            if coarse.size <= DENSE_LIMIT:
                return coarse._dense_kernel(None)
        return None

    def _sparse_kernel(self, threshold: float | None, nev: int = 12) -> KernelReport:
        p = ~self.massless
        if threshold is not None:
            scale = threshold / KERNEL_RATIO
        else:
            scale = float(np.median(self.K.diagonal()[p] / self.M.diagonal()[p]))
        sigma = -1e-3 * KERNEL_RATIO * scale
        shift = sp.diags(self._pin_shift() * self.massless.astype(float))
        lu = spla.splu((self.K - sigma * self.M + shift).tocsc())
        np_ = int(p.sum())

        def opinv(v):
            full = np.zeros(self.size)
            full[p] = v
            return lu.solve(full)[p]

        Mp = self.M[p][:, p].tocsr()
        OP = spla.LinearOperator((np_, np_), matvec=opinv, dtype=float)
        A = spla.LinearOperator((np_, np_), matvec=lambda v: v, dtype=float)
        rng = np.random.default_rng(0)
        vals, vecs = spla.eigsh(A, k=min(nev, np_ - 2), M=Mp, sigma=sigma, OPinv=OP, which="LM",
                                v0=rng.standard_normal(np_))
        order = np.argsort(vals)
        return self._finish_kernel(vals[order], vecs[:, order], None, scale, "shift-invert", threshold)

    def projection(self, psi: DiscreteField) -> DiscreteField:
        """P_R: W-orthogonal projection onto the discrete kernel."""
        out = np.zeros(self.layout.n_phys)
        ext = np.zeros(self.layout.n_ext)
        for y in self.kernel().basis:
            c = psi.inner(y)
            out += c * y.values
            ext += c * y.ext
        return DiscreteField(self.layout, out, ext)

    # -- solves ------------------------------------------------------------

    def _field(self, x: np.ndarray, u0: np.ndarray | None = None) -> DiscreteField:
        ext = self.elim.Z @ x
        if u0 is not None:
            ext = ext + u0
        return DiscreteField(self.layout, self.layout.restriction @ ext, ext)

    def _kernel_reduced(self) -> np.ndarray:
        basis = self.kernel().basis
        if not basis:
            return np.zeros((self.size, 0))
        Z = self.elim.Z
        # kernel fields lie in the range of Z; recover coordinates on the free unknowns
        return np.stack([y.ext[self.elim.free] for y in basis], axis=1)

    def _factor(self):
        if self._lu is None:
            Y = self._kernel_reduced()
            MY = self.M @ Y
            r = Y.shape[1]
            # massless ghost modes unseen by the energy are pinned by a tiny shift;
            # refinement against the unshifted K removes the bias elsewhere
            Kreg = self.K + sp.diags(self._pin_shift() * self.massless.astype(float))
            big = sp.bmat([[Kreg, sp.csr_matrix(MY)], [sp.csr_matrix(MY.T), sp.csr_matrix((r, r))]], format="csc")
            try:
                self._lu = (spla.splu(big), Y, MY)
            except RuntimeError as exc:
                raise NumericError(f"factorisation of the {self.family} system failed: {exc}") from exc
        return self._lu

    def load(self, chi: DiscreteField) -> np.ndarray:
        return self.RZ.T @ (self.layout.weights * chi.values)

    def solve_reduced(self, f: np.ndarray, tol: float = DEFAULT_TOL, method: str = "direct",
                      maxiter: int = 20000, progress: bool = False) -> tuple[np.ndarray, list[float], int, float]:
        """Solve K x = f on the M-orthogonal complement of the kernel.

        Raises NumericError unless the relative residual reaches ``tol`` or the
        rounding floor of evaluating K x, whichever is larger.
        """
        Y = self._kernel_reduced()
        MY = self.M @ Y
        removed_coeffs = Y.T @ f
        fnorm = float(np.linalg.norm(f)) or 1.0
        f = f - MY @ removed_coeffs
        removed = float(np.linalg.norm(removed_coeffs))
        history: list[float] = []
        if method == "direct":
            lu, _, _ = self._factor()
            r = Y.shape[1]
            x = np.zeros(self.size)
            res = f.copy()
            for it in range(6):
                dx = lu.solve(np.concatenate([res, np.zeros(r)]))[: self.size]
                x += dx
                x -= Y @ (MY.T @ x)
                res = f - self.K @ x
                history.append(float(np.linalg.norm(res)) / fnorm)
                if history[-1] <= tol * 1e-2:
                    break
            self._check(x, history, fnorm, tol)
            return x, history, len(history), removed
        if method == "cg":
            diag = self.K.diagonal().copy()
            diag[diag <= 0] = 1.0

            def project(v):
                return v - MY @ (Y.T @ v) if Y.shape[1] else v

            A = spla.LinearOperator(self.K.shape, matvec=lambda v: project(self.K @ v), dtype=float)
            Pre = spla.LinearOperator(self.K.shape, matvec=lambda v: project(v / diag), dtype=float)
            count = [0]

            def cb(xk):
                count[0] += 1
                if count[0] % 50 == 0 or count[0] == 1:
                    history.append(float(np.linalg.norm(f - self.K @ xk)) / fnorm)
                    if progress:
                        print(f"cg {self.family}: iteration {count[0]} residual {history[-1]:.3e}", file=sys.stderr)

            x, info = spla.cg(A, f, rtol=tol, maxiter=maxiter, M=Pre, callback=cb)
            x -= Y @ (MY.T @ x)
            history.append(float(np.linalg.norm(f - self.K @ x)) / fnorm)
            if info != 0 and history[-1] > 10 * tol:
                raise NumericError(f"conjugate gradients did not reach {tol:g} in {maxiter} iterations", history)
            self._check(x, history, fnorm, tol)
            return x, history, count[0], removed
        raise DomainError(f"unknown solve method {method!r}")

    def rounding_floor(self, x: np.ndarray, fnorm: float) -> float:
        """Relative residual attainable in double precision: 100 eps ‖|K||x|‖ / ‖f‖."""
        return 100 * np.finfo(float).eps * float(np.linalg.norm(abs(self.K) @ np.abs(x))) / fnorm

    def _check(self, x: np.ndarray, history: list[float], fnorm: float, tol: float) -> None:
        if history and history[-1] > max(tol, self.rounding_floor(x, fnorm)):
            raise NumericError(f"{self.family} residual {history[-1]:.3e} above tolerance {tol:g}", history)

    def solve(self, chi: DiscreteField, tol: float = DEFAULT_TOL, lift: DiscreteField | None = None,
              method: str = "direct", progress: bool = False) -> SolveResult:
        """Weak solve of B_R ψ = χ with first-layer data taken from ``lift``."""
        u0 = None
        data = None
        f = self.load(chi)
        if lift is not None:
            ext = lift.ext if lift.ext is not None else self.layout.extension @ lift.values
            data = self.constraints.matrix @ ext
            u0 = self.elim.particular(data, self.layout.n_ext)
            f = f - self.elim.Z.T @ (self.assembly.energy @ u0)
        x, hist, its, removed = self.solve_reduced(f, tol, method, progress=progress)
        psi = self._field(x, u0)
        cres = self.constraints.residual(psi.ext, data)
        return SolveResult(psi, self.family, hist[-1] if hist else 0.0, hist, self.kernel().dimension,
                           removed, its, method, cres)

    def green(self, psi: DiscreteField, tol: float = DEFAULT_TOL, method: str = "direct") -> DiscreteField:
        """G_R ψ: the solution of B_R u = ψ − P_R ψ orthogonal to the kernel."""
        x, _, _, _ = self.solve_reduced(self.load(psi), tol, method)
        return self._field(x)

    def green_residual(self, psi: DiscreteField, u: DiscreteField) -> float:
        """Relative weak residual of B_R u = ψ − P_R ψ."""
        target = psi - self.projection(psi)
        x = u.ext[self.elim.free]
        f = self.load(target)
        return float(np.linalg.norm(self.K @ x - f) / max(np.linalg.norm(self.load(psi)), 1e-300))

    def energy(self, psi: DiscreteField) -> float:
        ext = psi.ext if psi.ext is not None else self.layout.extension @ psi.values
        return float(ext @ (self.assembly.energy @ ext))


def _w_orthonormalize(fields: list[DiscreteField], tol: float = 1e-10) -> list[DiscreteField]:
    out: list[DiscreteField] = []
    for f in fields:
        v, e = f.values.copy(), f.ext.copy()
        for _ in range(2):
            for q in out:
                c = float(np.dot(f.layout.weights * v, q.values))
                v -= c * q.values
                e -= c * q.ext
        nrm = math.sqrt(float(np.dot(f.layout.weights, v * v)))
        if nrm > tol:
            out.append(DiscreteField(f.layout, v / nrm, e / nrm))
    return out


# --------------------------------------------------------------------------
# Solve context

class SolverContext:
    """Assemblies and family systems of one gridded domain, built on demand.

    A context is not shared between threads; independent contexts may run
    concurrently.
    """

    def __init__(self, domain: FlatDomain, plugin: ZeroOrderPlugin | None = None,
                 max_unknowns: int = MAX_UNKNOWNS):
        self.domain = domain
        self.plugin = plugin
        self.max_unknowns = max_unknowns
        self._assemblies: dict[tuple[int, int], Assembly] = {}
        self._systems: dict[tuple[int, int, str], FamilySystem] = {}
        self._bh: dict[tuple[int, int], Any] = {}

    def layout(self, k: int, m: int) -> Layout:
        return Layout.of(self.domain, k, m)

    def assembly(self, k: int, m: int) -> Assembly:
        if (k, m) not in self._assemblies:
            self._assemblies[(k, m)] = assemble(self.domain, k, m, self.plugin, self.max_unknowns)
        return self._assemblies[(k, m)]

    def system(self, k: int, m: int, family: str) -> FamilySystem:
        key = (k, m, family)
        if key not in self._systems:
            self._systems[key] = FamilySystem(self.assembly(k, m), family)
        return self._systems[key]

    def field(self, k: int, m: int, psi: Any) -> DiscreteField:
        return as_discrete(self.layout(k, m), psi)

    # -- discrete biharmonic module -----------------------------------------

    def _bh_solver(self, k: int, m: int):
        """Penalised normal matrix for the projection onto ker D (augmented Lagrangian)."""
        if (k, m) not in self._bh:
            A = self.assembly(k, m)
            lay = A.layout
            D = A.stacked.tocsr()
            Wd = sp.diags(A.stacked_weights)
            Rm = lay.restriction
            Q = (Rm.T @ sp.diags(lay.weights) @ Rm).tocsr()
            E = (D.T @ Wd @ D).tocsr()
            emax = float(E.diagonal().max()) if E.nnz else 0.0
            mu = BH_PENALTY * float(Q.diagonal().max()) / emax if emax > 0 else 0.0
            # ghosts unseen by both terms get a negligible mass
            pin = sp.diags(1e-8 * float(lay.weights.min()) * np.ones(lay.n_ext))
            lu = spla.splu((Q + mu * E + pin).tocsc())
            self._bh[(k, m)] = (lu, D, Wd, mu)
        return self._bh[(k, m)]

    def biharmonic_projection(self, psi: DiscreteField, tol: float = 1e-11, maxiter: int = 20) -> DiscreteField:
        """Nearest field (W-norm) annihilated by the unconstrained discrete H, H*, F*, F."""
        lay = psi.layout
        lu, D, Wd, mu = self._bh_solver(lay.k, lay.m)
        b = lay.restriction.T @ (lay.weights * psi.values)
        lam = np.zeros(D.shape[0])
        scale = psi.norm() or 1.0
        phi = lu.solve(b)
        for _ in range(maxiter):
            r = D @ phi
            if math.sqrt(float(r @ (Wd @ r))) <= tol * scale or mu == 0.0:
                break
            lam += mu * r
            phi = lu.solve(b - D.T @ (Wd @ lam))
        return DiscreteField(lay, lay.restriction @ phi, phi)

    def biharmonic_basis(self, k: int, m: int, tol: float = 1e-8) -> list[DiscreteField]:
        """W-orthonormal basis of the unconstrained discrete kernel of D (dense)."""
        A = self.assembly(k, m)
        lay = A.layout
        if lay.n_ext > DENSE_LIMIT:
            raise ResourceError(f"dense biharmonic basis on {lay.n_ext} unknowns exceeds {DENSE_LIMIT}")
        D = A.stacked.toarray() * min(lay.h) ** 2
        used = np.abs(D).sum(axis=0) > 0
        N = sla.null_space(D[:, used], rcond=tol)
        ext = np.zeros((lay.n_ext, N.shape[1]))
        ext[used] = N
        phys = lay.restriction @ ext
        w = np.sqrt(lay.weights)[:, None]
        U, S, Vt = np.linalg.svd(w * phys, full_matrices=False)
        keep = S > tol * max(S.max() if S.size else 1.0, 1e-300) if S.size else np.zeros(0, bool)
        coef = Vt[keep].T / S[keep]
        return [DiscreteField(lay, phys @ coef[:, i], ext @ coef[:, i]) for i in range(coef.shape[1])]


# --------------------------------------------------------------------------
# Front-end operations

def solve(family: str, chi: Any, domain: FlatDomain | None = None, k: int = 0, m: int = 0,
          bc: Mapping | None = None, tol: float = DEFAULT_TOL, method: str = "direct",
          context: SolverContext | None = None, progress: bool = False) -> SolveResult:
    """Solve B_R ψ = χ weakly with first-layer conditions of ``family``.

    ``bc`` may carry ``{"lift": field}``: the first-layer data are then the
    boundary rows of that field.  The kernel component of χ is projected out
    and reported.
    """
    ctx = context or SolverContext(domain)
    if isinstance(chi, DiscreteField):
        k, m = chi.layout.k, chi.layout.m
    elif isinstance(chi, DoubleFormField):
        k, m = chi.k, chi.m
    system = ctx.system(k, m, family)
    chi_d = ctx.field(k, m, chi)
    lift = None
    if bc and bc.get("lift") is not None:
        lift = ctx.field(k, m, bc["lift"])
    if progress:
        print(f"solve {family} ({k},{m}) on grid {ctx.domain.grid}: {system.size} unknowns", file=sys.stderr)
    return system.solve(chi_d, tol, lift, method, progress)


def green_apply(family: str, psi: Any, context: SolverContext, k: int | None = None, m: int | None = None,
                tol: float = DEFAULT_TOL, method: str = "direct") -> DiscreteField:
    if isinstance(psi, DiscreteField):
        k, m = psi.layout.k, psi.layout.m
    elif isinstance(psi, DoubleFormField):
        k, m = psi.k, psi.m
    system = context.system(k, m, family)
    return system.green(context.field(k, m, psi), tol, method)


@dataclass
class KernelStudy:
    family: str
    k: int
    m: int
    grids: list[int]
    reports: list[KernelReport]

    @property
    def dimension(self) -> int | None:
        dims = {r.dimension for r in self.reports}
        return dims.pop() if len(dims) == 1 else None

    @property
    def stable(self) -> bool:
        return self.dimension is not None

    @property
    def inconclusive(self) -> bool:
        return any(r.inconclusive for r in self.reports) or not self.stable

    @property
    def basis(self) -> list[DiscreteField]:
        return self.reports[-1].basis

    def to_json(self) -> dict:
        return {"family": self.family, "bidegree": [self.k, self.m], "grids": self.grids,
                "dimensions": [r.dimension for r in self.reports], "dimension": self.dimension,
                "stable": self.stable, "inconclusive": self.inconclusive,
                "reports": [r.to_json() for r in self.reports]}


def kernel_dimension(family: str, d: int, k: int, m: int, grids: Sequence[int] = (24, 48),
                     extent: Sequence = (), contexts: Sequence[SolverContext] | None = None) -> KernelStudy:
    """Discrete BH_R dimension on successively refined grids.

    The cut is set on the coarsest grid (1e-6 × median nonzero eigenvalue) and
    reused on the finer ones.
    """
    reports = []
    threshold = None
    for i, n in enumerate(grids):
        ctx = contexts[i] if contexts else SolverContext(FlatDomain(d, "box", tuple(extent), n))
        rep = ctx.system(k, m, family).kernel(threshold)
        threshold = rep.threshold
        reports.append(rep)
    return KernelStudy(family, k, m, list(grids), reports)


@dataclass
class DecompositionResult:
    """ψ = EE + CC + EC + CE + BH with the 5×5 Gram matrix of the parts."""

    EE: DiscreteField
    CC: DiscreteField
    EC: DiscreteField
    CE: DiscreteField
    BH: DiscreteField
    gram: np.ndarray
    residual: float
    norm: float
    potentials: dict[str, DiscreteField] = field(repr=False, default_factory=dict)

    NAMES = ("EE", "CC", "EC", "CE", "BH")

    @property
    def parts(self) -> list[DiscreteField]:
        return [self.EE, self.CC, self.EC, self.CE, self.BH]

    @property
    def max_offdiagonal(self) -> float:
        g = self.gram.copy()
        np.fill_diagonal(g, 0)
        return float(np.max(np.abs(g)))

    @property
    def relative_residual(self) -> float:
        return self.residual / self.norm if self.norm else self.residual

    @property
    def relative_offdiagonal(self) -> float:
        return self.max_offdiagonal / self.norm**2 if self.norm else self.max_offdiagonal

    def part_norms(self) -> dict[str, float]:
        return {n: p.norm() for n, p in zip(self.NAMES, self.parts)}

    def to_json(self) -> dict:
        return {"names": list(self.NAMES), "gram": self.gram.tolist(), "residual": self.residual,
                "norm": self.norm, "relative_residual": self.relative_residual,
                "relative_offdiagonal": self.relative_offdiagonal, "part_norms": self.part_norms()}


def _outer(ctx: SolverContext, outer: str, inner: str, pot: DiscreteField, k: int, m: int) -> DiscreteField:
    """Weak application of ``outer`` to a potential: the quadrature adjoint of ``inner``.

    The result y satisfies <y, η>_W = <pot, inner(E η)>_W for every physical η,
    which reproduces the strong stencil in the interior and the energy's
    summation by parts at the boundary.
    """
    A = ctx.assembly(k, m)
    op = A.ops[inner]
    lay = A.layout
    v = lay.extension.T @ (op.matrix.T @ (op.target.weights * pot.values))
    return DiscreteField(lay, v / lay.weights)


def decompose(psi: Any, context: SolverContext, k: int | None = None, m: int | None = None,
              tol: float = DEFAULT_TOL) -> DecompositionResult:
    """Five-way decomposition from the mixed Green operators.

    EE = H H* G_TT ψ, CC = H* H G_NN ψ, EC = F F* G_TN ψ, CE = F* F G_NT ψ, with
    the outer operator applied weakly.  The remainder is projected onto the
    discrete biharmonic module to give BH, and the distance of the remainder
    from that module is the residual.
    """
    if context.plugin is not None:
        raise DomainError("the decomposition needs the exactness relations: use a flat context without plugin")
    if isinstance(psi, DiscreteField):
        k, m = psi.layout.k, psi.layout.m
    elif isinstance(psi, DoubleFormField):
        k, m = psi.k, psi.m
    lay = context.layout(k, m)
    f = context.field(k, m, psi)
    zero = DiscreteField(lay, np.zeros(lay.n_phys))
    parts: dict[str, DiscreteField] = {}
    potentials: dict[str, DiscreteField] = {}
    plan = (("EE", "TT", "Hstar", "H"), ("CC", "NN", "H", "Hstar"), ("EC", "TN", "Fstar", "F"), ("CE", "NT", "F", "Fstar"))
    A = context.assembly(k, m)
    for name, family, inner, outer in plan:
        if A.ops[inner].matrix.shape[0] == 0:
            parts[name] = zero
            continue
        g = context.system(k, m, family).green(f, tol)
        pot = A.ops[inner](g)
        potentials[name] = pot
        parts[name] = _outer(context, outer, inner, pot, k, m)
    kappa = f - parts["EE"] - parts["CC"] - parts["EC"] - parts["CE"]
    bh = context.biharmonic_projection(kappa)
    parts["BH"] = bh
    names = DecompositionResult.NAMES
    gram = np.array([[parts[a].inner(parts[b]) for b in names] for a in names])
    residual = (kappa - bh).norm()
    return DecompositionResult(parts["EE"], parts["CC"], parts["EC"], parts["CE"], parts["BH"], gram,
                               residual, f.norm(), potentials)


# --------------------------------------------------------------------------
# Splitting of the biharmonic module

# outer/inner pair of the term that vanishes on the complement of BH_R
_MISSING = {"TT": ("H", "Hstar"), "NN": ("Hstar", "H"), "NT": ("Fstar", "F"), "TN": ("F", "Fstar")}


@dataclass
class BHSplit:
    """BH = BH_R ⊕ complement, measured on a basis of the discrete biharmonic module."""

    family: str
    k: int
    m: int
    dimension: int
    kernel_dimension: int
    complement_dimension: int
    orthogonality: float
    vanishing_term: float
    inconclusive: bool

    def to_json(self) -> dict:
        return {"family": self.family, "bidegree": [self.k, self.m], "dimension": self.dimension,
                "kernel_dimension": self.kernel_dimension, "complement_dimension": self.complement_dimension,
                "orthogonality": self.orthogonality, "vanishing_term": self.vanishing_term,
                "inconclusive": self.inconclusive}


def _span_rank(fields: list[DiscreteField], tol: float) -> int:
    if not fields:
        return 0
    w = np.sqrt(fields[0].layout.weights)
    S = np.linalg.svd(np.stack([w * f.values for f in fields], axis=1), compute_uv=False)
    return int(np.sum(S > tol))


def bh_split(family: str, context: SolverContext, k: int = 0, m: int = 0,
             basis: Sequence[DiscreteField] | None = None, tol: float = 1e-6) -> BHSplit:
    """Project a W-orthonormal basis of the discrete biharmonic module onto BH_R
    and its complement.

    The complement is the range of the remaining three operators: on it the
    fourth term of B_R G_R vanishes, which is reported as ``vanishing_term``.
    """
    system = context.system(k, m, family)
    report = system.kernel()
    if basis is None:
        basis = context.biharmonic_basis(k, m)
    basis = list(basis)
    kernel_parts = [system.projection(b) for b in basis]
    rest = [b - p for b, p in zip(basis, kernel_parts)]
    orth = 0.0
    for i, p in enumerate(kernel_parts):
        for j, c in enumerate(rest):
            scale = basis[i].norm() * basis[j].norm() or 1.0
            orth = max(orth, abs(p.inner(c)) / scale)
    outer, inner = _MISSING[family]
    A = context.assembly(k, m)
    vanishing = 0.0
    if A.ops[inner].matrix.shape[0]:
        for c in rest:
            if c.norm() <= tol:
                continue
            pot = A.ops[inner](system.green(c))
            vanishing = max(vanishing, _outer(context, outer, inner, pot, k, m).norm() / c.norm())
    return BHSplit(family, k, m, _span_rank(basis, tol), _span_rank(kernel_parts, tol), _span_rank(rest, tol),
                   orth, vanishing, report.inconclusive)


# --------------------------------------------------------------------------
# Lattice Sobolev norm and the Korn-type constant

def _grid_weights(n: Sequence[int], h: Sequence[float], types: Sequence[int]) -> np.ndarray:
    w = np.ones(1)
    for na, ha, t in zip(n, h, types):
        if t == NODE:
            v = np.full(na + 1, ha)
            v[0] = v[-1] = ha / 2
        else:
            v = np.full(na, ha)
        w = np.multiply.outer(w, v)
    return w.ravel()


@lru_cache(maxsize=None)
def derivative_operators(lay: Layout, order: int = 2) -> tuple[tuple[sp.csr_matrix, np.ndarray], ...]:
    """All partial derivatives of order ≤ ``order`` of every component, extended
    to physical points, each with the quadrature weights of its grid."""
    d = lay.d
    keys: list[tuple[int, ...]] = [()]
    if order >= 1:
        keys += [(a,) for a in range(d)]
    if order >= 2:
        keys += [(a, b) for a in range(d) for b in range(a, d)]
    out = []
    for c, types in enumerate(lay.types):
        lo, hi = lay.ext_starts[c], lay.ext_starts[c + 1]
        select = sp.identity(lay.n_ext, format="csr")[lo:hi]
        for key in keys:
            counts = [key.count(a) for a in range(d)]
            tgt = tuple(t if cnt % 2 == 0 else 1 - t for t, cnt in zip(types, counts))
            factor = _kron([_factor(lay.n[a], lay.h[a], types[a], counts[a], tgt[a]) for a in range(d)])
            # mixed second derivatives count twice in the Frobenius norm of the Hessian
            mult = 2.0 if len(key) == 2 and key[0] != key[1] else 1.0
            out.append(((factor @ select).tocsr(), mult * _grid_weights(lay.n, lay.h, tgt)))
    return tuple(out)


def sobolev_norm(psi: DiscreteField, order: int = 2) -> float:
    """Discrete H^order norm from compact lattice differences (ghosts included)."""
    lay = psi.layout
    ext = psi.ext if psi.ext is not None else lay.extension @ psi.values
    total = 0.0
    for mat, w in derivative_operators(lay, order):
        v = mat @ ext
        total += float(np.dot(w, v * v))
    return math.sqrt(total)


@dataclass
class KornReport:
    """Empirical sup of ‖ψ‖²_{H²} / (‖D_R ψ‖² + ‖P_R ψ‖²) over samples of H²_R."""

    family: str
    k: int
    m: int
    grid: list[int]
    ratios: list[float]

    @property
    def constant(self) -> float:
        return max(self.ratios) if self.ratios else float("nan")

    def to_json(self) -> dict:
        return {"family": self.family, "bidegree": [self.k, self.m], "grid": self.grid,
                "ratios": self.ratios, "constant": self.constant, "samples": len(self.ratios)}


def korn_ratio(system: FamilySystem, psi: DiscreteField) -> float:
    A = system.assembly
    ext = psi.ext if psi.ext is not None else system.layout.extension @ psi.values
    Dpsi = A.stacked @ ext
    denom = float(np.dot(A.stacked_weights, Dpsi * Dpsi)) + system.projection(psi).norm() ** 2
    return sobolev_norm(psi) ** 2 / denom


def korn_samples(context: SolverContext, family: str, k: int, m: int, count: int = 6,
                 seed: int = 0, tol: float = DEFAULT_TOL) -> list[DiscreteField]:
    """Green solutions G_R χ of seeded polynomial loads, plus the kernel basis and
    kernel-shifted solutions; all satisfy the first-layer conditions of R."""

    rng = random.Random(seed)
    system = context.system(k, m, family)
    poly = FlatDomain(context.domain.d, "box", context.domain.extent)
    out = []
    for _ in range(count):
        chi = fc.random_field(poly, k, m, rng, degree=3, max_keys=4, n_terms=4)
        u = system.green(context.field(k, m, DoubleFormField(context.domain, chi.value)), tol)
        out.append(u * (1.0 / (u.norm() or 1.0)))
    kernel = system.kernel().basis
    out.extend(kernel)
    for y, u in zip(kernel, out[:count]):
        out.append(DiscreteField(u.layout, u.values + y.values, u.ext + y.ext))
    return out


def korn_constant(family: str, context: SolverContext, k: int = 0, m: int = 0,
                  samples: Sequence[DiscreteField] | None = None, count: int = 6, seed: int = 0) -> KornReport:
    system = context.system(k, m, family)
    if samples is None:
        samples = korn_samples(context, family, k, m, count, seed)
    ratios = [korn_ratio(system, s) for s in samples]
    return KornReport(family, k, m, list(system.layout.n), ratios)


# --------------------------------------------------------------------------
# Transposition

TRANSPOSE_PARTNER = {"TT": "TT", "NN": "NN", "NT": "TN", "TN": "NT"}


def transpose_defect(family: str, psi: Any, context: SolverContext, k: int | None = None, m: int | None = None,
                     tol: float = DEFAULT_TOL) -> float:
    """‖(G_R ψ^T)^T − G_R' ψ‖ / ‖G_R' ψ‖ with R' the transposed family."""
    if isinstance(psi, DiscreteField):
        k, m = psi.layout.k, psi.layout.m
    elif isinstance(psi, DoubleFormField):
        k, m = psi.k, psi.m
    f = context.field(k, m, psi)
    left = green_apply(family, f.transpose(), context, tol=tol).transpose()
    right = green_apply(TRANSPOSE_PARTNER[family], f, context, tol=tol)
    return (left - right).norm() / (right.norm() or 1.0)


# --------------------------------------------------------------------------
# Clamped plate convergence study

@dataclass
class ConvergenceStudy:
    grids: list[int]
    h: list[float]
    errors: list[float]
    residuals: list[float]

    @property
    def orders(self) -> list[float]:
        return [math.log(e0 / e1) / math.log(h0 / h1)
                for e0, e1, h0, h1 in zip(self.errors, self.errors[1:], self.h, self.h[1:])]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["h", "err", "order"])
        orders = [""] + [repr(o) for o in self.orders]
        for h, e, o in zip(self.h, self.errors, orders):
            writer.writerow([repr(h), repr(e), o])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"grids": self.grids, "h": self.h, "errors": self.errors, "orders": self.orders,
                "residuals": self.residuals}


def plate_solution(domain: FlatDomain) -> DoubleFormField:
    """(x(1−x)y(1−y))² on the unit square: clamped on all four sides."""
    R = domain.ring
    x, y = R.gens[:2]
    return DoubleFormField(domain, DoubleForm(2, 0, 0, {((), ()): (x * (1 - x) * y * (1 - y)) ** 2}))


def clamped_plate_study(grids: Sequence[int] = (16, 32, 64), tol: float = DEFAULT_TOL,
                        method: str = "direct") -> ConvergenceStudy:
    """Relative max-norm error of the TT solve against the manufactured plate."""
    errors, hs, residuals = [], [], []
    for n in grids:
        ctx = SolverContext(FlatDomain(2, grid=n))
        exact = plate_solution(ctx.domain)
        chi = fc.bilaplacian(exact)
        res = solve("TT", chi, context=ctx, tol=tol, method=method)
        ref = ctx.field(0, 0, exact)
        errors.append(float(np.abs(res.psi.values - ref.values).max() / np.abs(ref.values).max()))
        hs.append(1.0 / n)
        residuals.append(res.residual)
    return ConvergenceStudy(list(grids), hs, errors, residuals)


# --------------------------------------------------------------------------
# Problem files

@dataclass
class Problem:
    context: SolverContext
    family: str
    k: int
    m: int
    rhs: DoubleFormField
    bc: dict
    tol: float


def _domain_from_json(data: Any) -> FlatDomain:
    if isinstance(data, Mapping):
        return FlatDomain(int(data["d"]), data.get("kind", "box"), tuple(data.get("extent", ())), data.get("grid", 32))
    raise DomainError("domain must be an object with d, kind, extent and grid")


def load_problem(data: Mapping) -> Problem:
    """Problem JSON: {"domain", "k", "m", "family", "rhs", "bc": {"lift": field}, "tol"}."""
    for key in ("domain", "family", "rhs"):
        if key not in data:
            raise DomainError(f"problem is missing {key!r}")
    domain = _domain_from_json(data["domain"])
    family = str(data["family"])
    if family not in FAMILIES:
        raise DomainError(f"unknown family {family!r}")
    rhs = fc.field_from_json(data["rhs"], domain)
    k, m = int(data.get("k", rhs.k)), int(data.get("m", rhs.m))
    if (rhs.k, rhs.m) != (k, m):
        raise DomainError("rhs bidegree does not match k, m")
    bc = dict(data.get("bc") or {})
    if bc.get("lift") is not None:
        bc["lift"] = fc.field_from_json(bc["lift"], domain)
    unknown = set(bc) - {"lift"}
    if unknown:
        raise DomainError(f"unsupported boundary data {sorted(unknown)}: give a lift field")
    return Problem(SolverContext(domain), family, k, m, rhs, bc, float(data.get("tol", DEFAULT_TOL)))


def run_problem(problem: Problem, method: str = "direct", progress: bool = False) -> SolveResult:
    return solve(problem.family, problem.rhs, k=problem.k, m=problem.m, bc=problem.bc, tol=problem.tol,
                 method=method, context=problem.context, progress=progress)
