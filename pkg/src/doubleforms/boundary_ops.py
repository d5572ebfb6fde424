"""Boundary projections and first-order boundary operators on box faces.

A face is ``x_r = 0`` or ``x_r = L_r``.  The inward unit normal is written
``∂_r`` (so ``∂_r = +e_r`` on the lower face and ``-e_r`` on the upper one);
the outward normal is ``N = -∂_r``.  Face fields live on a (d-1)-dimensional box
with the tangential axes relabelled 1..d-1 in increasing order, and the face
is oriented by the volume form vol_0 with ``vol = vol_0 ∧ dr``.
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from fractions import Fraction
from typing import Any

import numpy as np
from sympy import QQ
from sympy.polys.rings import PolyElement

from . import fiber_algebra as fa
from . import field_calculus as fc
from .fiber_algebra import DomainError, DoubleForm, MultiIndexPair
from .field_calculus import DoubleFormField, FlatDomain


@dataclass(frozen=True)
class Face:
    axis: int
    side: int  # 0 for x_r = 0, 1 for x_r = L_r

    def __post_init__(self):
        if self.side not in (0, 1):
            raise DomainError(f"face side must be 0 or 1, got {self.side}")
        if self.axis < 1:
            raise DomainError(f"face axis must be positive, got {self.axis}")

    @property
    def inward_sign(self) -> int:
        return 1 if self.side == 0 else -1

    def orientation(self, d: int) -> int:
        """Sign of vol_0 against the relabelled standard volume of the face.

        The face is oriented so that vol = vol_0 ∧ dr with dr the inward
        conormal; this is the choice under which the Hodge star exchanges
        tangential and normal projections with sign (-1)^(d+1).
        """
        return self.inward_sign * (-1) ** (d - self.axis)

    def to_json(self) -> dict:
        return {"axis": self.axis, "side": self.side}

    @classmethod
    def from_json(cls, data: Mapping) -> "Face":
        return cls(int(data["axis"]), int(data["side"]))


def faces(d: int) -> Iterator[Face]:
    for r in range(1, d + 1):
        for side in (0, 1):
            yield Face(r, side)


def face_domain(domain: FlatDomain, face: Face) -> FlatDomain:
    if domain.kind != "box":
        raise DomainError("a torus has no boundary")
    if domain.d < 2:
        raise DomainError("faces need d >= 2")
    if face.axis > domain.d:
        raise DomainError(f"face axis {face.axis} outside 1..{domain.d}")
    keep = [i for i in range(domain.d) if i != face.axis - 1]
    grid = None if domain.grid is None else tuple(domain.grid[i] for i in keep)
    return FlatDomain(domain.d - 1, "box", tuple(domain.extent[i] for i in keep), grid)


def _relabel(index: tuple[int, ...], r: int) -> tuple[int, ...]:
    return tuple(i if i < r else i - 1 for i in index)


def normal_vector(d: int, face: Face) -> list[int]:
    """Components of the inward normal ∂_r."""
    return fa.coordinate_vector(d, face.axis, face.inward_sign)


def restrict_coefficient(c: Any, domain: FlatDomain, face: Face, target: FlatDomain) -> Any:
    r = face.axis
    if isinstance(c, PolyElement):
        L = Fraction(domain.extent[r - 1]) if face.side else Fraction(0)
        out: dict[tuple, Any] = {}
        for exps, coef in c.terms():
            e = exps[r - 1]
            if e and L == 0:
                continue
            q = QQ(L.numerator, L.denominator) ** e * coef
            key = exps[: r - 1] + exps[r:]
            out[key] = out.get(key, 0) + q
        return target.ring.from_dict({k: v for k, v in out.items() if v})
    if isinstance(c, np.ndarray):
        return np.take(c, 0 if face.side == 0 else -1, axis=r - 1)
    return c


def project(psi: DoubleFormField, face: Face, form_normal: bool, vector_normal: bool) -> DoubleFormField:
    """One of the four level-set projections, restricted to the face."""
    target = face_domain(psi.domain, face)
    r, s = face.axis, face.inward_sign
    k = psi.k - int(form_normal)
    m = psi.m - int(vector_normal)
    if not fa.in_range(target.d, k, m):
        return DoubleFormField.zero(target, k, m)
    out: dict[MultiIndexPair, Any] = {}
    for (i, j), c in psi.coeffs.items():
        if (r in i) != form_normal or (r in j) != vector_normal:
            continue
        sign = 1
        if form_normal:
            sign *= s * (-1) ** i.index(r)
            i = tuple(a for a in i if a != r)
        if vector_normal:
            sign *= s * (-1) ** j.index(r)
            j = tuple(a for a in j if a != r)
        rc = restrict_coefficient(c, psi.domain, face, target)
        if fa.is_zero(rc):
            continue
        out[MultiIndexPair(_relabel(i, r), _relabel(j, r))] = rc if sign > 0 else -rc
    return DoubleFormField(target, DoubleForm._raw(target.d, k, m, out))


def P_tt(psi, face):
    return project(psi, face, False, False)


def P_nt(psi, face):
    return project(psi, face, True, False)


def P_tn(psi, face):
    return project(psi, face, False, True)


def P_nn(psi, face):
    return project(psi, face, True, True)


@dataclass
class BoundaryTrace:
    face: Face
    tt: DoubleFormField
    nt: DoubleFormField
    tn: DoubleFormField
    nn: DoubleFormField

    def reconstruct(self, d: int) -> DoubleForm:
        """Reassemble ψ on the face as an ambient-dimension value.

        Face indices are mapped back to ambient ones and the normal covector
        dr = ∂_r♭ is wedged in front of the normal parts.
        """
        r, s = self.face.axis, self.face.inward_sign
        back = lambda idx: tuple(i if i < r else i + 1 for i in idx)  # noqa: E731
        dr = DoubleForm.basis(d, (r,), (), s)
        drt = fa.transpose(dr)

        def lift(part: DoubleFormField) -> DoubleForm:
            return DoubleForm._raw(
                d, part.k, part.m, {MultiIndexPair(back(i), back(j)): c for (i, j), c in part.coeffs.items()}
            )

        return (
            lift(self.tt)
            + fa.wedge(dr, lift(self.nt))
            + fa.wedge(drt, lift(self.tn))
            + fa.wedge(fa.wedge(dr, drt), lift(self.nn))
        )

    def to_json(self) -> dict:
        return {
            "face": self.face.to_json(),
            "tt": fc.field_to_json(self.tt),
            "nt": fc.field_to_json(self.nt),
            "tn": fc.field_to_json(self.tn),
            "nn": fc.field_to_json(self.nn),
        }


def face_projections(psi: DoubleFormField, face: Face) -> BoundaryTrace:
    if psi.domain.kind != "box":
        raise DomainError("a torus has no boundary")
    return BoundaryTrace(face, P_tt(psi, face), P_nt(psi, face), P_tn(psi, face), P_nn(psi, face))


def restrict(psi: DoubleFormField, face: Face) -> DoubleForm:
    """Ambient restriction ψ|_face with coefficients as face functions."""
    target = face_domain(psi.domain, face)
    return psi.value.map_coeffs(lambda c: restrict_coefficient(c, psi.domain, face, target))


def face_hodge(eta: DoubleFormField, face: Face, side: str = "form") -> DoubleFormField:
    """Hodge star of the face, oriented by vol = vol_0 ∧ dr."""
    return fc.hodge(eta, side) * face.orientation(eta.d + 1)


# --------------------------------------------------------------------------
# First-order boundary operators

def _check_h(h, face_dim: int):
    if h is None:
        return None
    value = h.value if isinstance(h, DoubleFormField) else h
    if value.d != face_dim or (value.k, value.m) != (1, 1):
        raise DomainError("h must be a (1,1) double form on the face")
    if fa.transpose(value) != value:
        raise DomainError("h must be symmetric")
    return h


@dataclass
class FirstOrderTraces:
    face: Face
    T: DoubleFormField
    Tstar: DoubleFormField
    F: DoubleFormField
    Fstar: DoubleFormField
    h: Any = None


def T_op(psi: DoubleFormField, face: Face) -> DoubleFormField:
    half = Fraction(1, 2)
    a = P_nt(fc.d(psi), face) - fc.d(P_nt(psi, face))
    b = P_tn(fc.d_v(psi), face) - fc.d_v(P_tn(psi, face))
    return (a + b) * half


def T_star_op(psi: DoubleFormField, face: Face) -> DoubleFormField:
    half = Fraction(1, 2)
    a = P_tn(fc.delta(psi), face) + fc.delta(P_tn(psi, face))
    b = P_nt(fc.delta_v(psi), face) + fc.delta_v(P_nt(psi, face))
    return -(a + b) * half


def F_star_op(psi: DoubleFormField, face: Face) -> DoubleFormField:
    half = Fraction(1, 2)
    a = P_nn(fc.d_v(psi), face) - fc.d_v(P_nn(psi, face))
    b = P_tt(fc.delta(psi), face) + fc.delta(P_tt(psi, face))
    return (a - b) * half


def F_op(psi: DoubleFormField, face: Face) -> DoubleFormField:
    half = Fraction(1, 2)
    a = P_nn(fc.d(psi), face) - fc.d(P_nn(psi, face))
    b = P_tt(fc.delta_v(psi), face) + fc.delta_v(P_tt(psi, face))
    return (a - b) * half


def first_order_boundary(psi: DoubleFormField, face: Face, h=None) -> FirstOrderTraces:
    """The commutator-defined boundary operators 𝔗, 𝔗*, 𝔉, 𝔉* on one face.

    The formulas are evaluated literally with face-intrinsic d and δ.  The
    second fundamental form ``h`` does not enter them; it is validated and
    carried along for :func:`tangential_commutators`.
    """
    target = face_domain(psi.domain, face)
    h = _check_h(h, target.d)
    return FirstOrderTraces(face, T_op(psi, face), T_star_op(psi, face), F_op(psi, face), F_star_op(psi, face), h)


def normal_derivative(psi: DoubleFormField, face: Face) -> DoubleFormField:
    """Componentwise inward normal derivative of ψ, as an ambient field."""
    s = face.inward_sign
    return psi.like(psi.value.map_coeffs(lambda c: fc.partial(c, face.axis, psi.domain) * s))


def T_flat(psi: DoubleFormField, face: Face) -> DoubleFormField:
    """Flat-face form of 𝔗: ℙtt ∂_r ψ − d ℙnt ψ − d_V ℙtn ψ."""
    return P_tt(normal_derivative(psi, face), face) - fc.d(P_nt(psi, face)) - fc.d_v(P_tn(psi, face))


def tangential_commutators(psi: DoubleFormField, face: Face, h=None) -> dict[str, DoubleFormField]:
    """Residuals of the commutation of second-order operators with the face
    projections, including the second-fundamental-form terms.

    On a flat box face h vanishes and every residual is the zero face field.
    """
    target = face_domain(psi.domain, face)
    h = _check_h(h, target.d)
    traces = first_order_boundary(psi, face)

    shifts = {"wedge": (1, 1), "trace": (-1, -1), "i": (1, -1), "i_star": (-1, 1)}

    def with_h(which: str, eta: DoubleFormField) -> DoubleFormField:
        if h is None:
            dk, dm = shifts[which]
            return DoubleFormField.zero(target, eta.k + dk, eta.m + dm)
        hv = h if isinstance(h, DoubleFormField) else DoubleFormField.constant(target, h)
        if which == "wedge":
            return fc.wedge(hv, eta)
        return _a_field(hv, eta, which)

    return {
        "tt_H": P_tt(fc.H(psi), face) - fc.H(P_tt(psi, face)) - with_h("wedge", traces.T),
        "nn_Hstar": P_nn(fc.H_star(psi), face) - fc.H_star(P_nn(psi, face)) - with_h("trace", traces.Tstar),
        "nt_Fstar": P_nt(fc.F_star(psi), face) + fc.F_star(P_nt(psi, face)) - with_h("i_star", traces.Fstar),
        "tn_F": P_tn(fc.F(psi), face) + fc.F(P_tn(psi, face)) - with_h("i", traces.F),
    }


def _a_field(A: DoubleFormField, eta: DoubleFormField, which: str) -> DoubleFormField:
    """A-operator family with a variable (field-valued) symmetric A."""
    sign = fa.a_operator_sign(which, eta.d, eta.k, eta.m, A.k)
    st = lambda x, side: fc.hodge(x, side)  # noqa: E731
    if which == "trace":
        inner = fc.wedge(A, st(st(eta, "form"), "vector"))
        return st(st(inner, "form"), "vector") * sign
    if which == "i":
        return st(fc.wedge(A, st(eta, "vector")), "vector") * sign
    if which == "i_star":
        return st(fc.wedge(A, st(eta, "form")), "form") * sign
    raise DomainError(f"unknown operator {which!r}")


def star_duality_residuals(psi: DoubleFormField, face: Face) -> dict[str, DoubleFormField]:
    """Residuals of the Hodge-star relations between 𝔗 and 𝔗*, 𝔉*, 𝔉.

    With the face orientation vol = vol_0 ∧ dr the relations read
    𝔗* = (-1)^(dk+dm) ⋆0 ⋆0V 𝔗 ⋆ ⋆V,  𝔉* = (-1)^(dk+1) ⋆0 𝔗 ⋆  and
    𝔉 = (-1)^(dm+1) ⋆0V 𝔗 ⋆V, for ψ of bidegree (k, m).
    """
    d, k, m = psi.d, psi.k, psi.m
    h0 = lambda q, side="form": face_hodge(q, face, side)  # noqa: E731
    both = fc.hodge(fc.hodge(psi, "vector"), "form")
    return {
        "Tstar": T_star_op(psi, face) - h0(h0(T_op(both, face)), "vector") * (-1) ** (d * k + d * m),
        "Fstar": F_star_op(psi, face) - h0(T_op(fc.hodge(psi), face)) * (-1) ** (d * k + 1),
        "F": F_op(psi, face) - h0(T_op(fc.hodge(psi, "vector"), face), "vector") * (-1) ** (d * m + 1),
    }


# --------------------------------------------------------------------------
# Integration by parts

def face_integral(c: Any, face_dom: FlatDomain) -> Any:
    return fc.integrate(c, face_dom)


def edge_weight(domain: FlatDomain) -> Any:
    """Polynomial vanishing on every edge (codimension-two face) of the box
    but not identically on any face.

    Multiplying a test field by it removes the edge contributions that face
    integration by parts produces on a box, whose boundary is not smooth.
    """
    R = domain.ring
    b = [x * (R(QQ(Fraction(L).numerator, Fraction(L).denominator)) - x) for x, L in zip(R.gens, domain.extent)]
    total = R(0)
    for skip in range(domain.d):
        term = R(1)
        for i, f in enumerate(b):
            if i != skip:
                term *= f
        total += term
    return total


def boundary_pairing(psi: DoubleFormField, eta: DoubleFormField, which: str) -> Any:
    """Boundary term B with ⟨Op ψ, η⟩ = ⟨ψ, Op* η⟩ + B for Op = H or F.

    For H this is ∫[(ℙtt ψ, 𝔗* η) − (𝔗 ψ, ℙnn η)].  For F it is
    −∫[(ℙtn ψ, 𝔉* η) − (𝔉 ψ, ℙnt η)]; the overall minus sign follows from the
    first-order Green formulas and face integration by parts.  Both terms rely
    on that face integration, so on a box they are exact only when the
    integrands vanish on the edges (see :func:`edge_weight`).
    """
    total: Any = 0
    for face in faces(psi.d):
        target = face_domain(psi.domain, face)
        if which == "H":
            a = fa.inner(P_tt(psi, face).value, T_star_op(eta, face).value)
            b = fa.inner(T_op(psi, face).value, P_nn(eta, face).value)
            integrand = a - b
        elif which == "F":
            a = fa.inner(P_tn(psi, face).value, F_star_op(eta, face).value)
            b = fa.inner(F_op(psi, face).value, P_nt(eta, face).value)
            integrand = b - a
        else:
            raise DomainError(f"unknown operator {which!r}; expected H or F")
        if not fa.is_zero(integrand):
            total = total + face_integral(integrand, target)
    return total


def greens_residual(psi: DoubleFormField, eta: DoubleFormField, which: str, plugin=None) -> Any:
    """⟨Op ψ, η⟩ − ⟨ψ, Op* η⟩ − boundary pairing.

    ``psi`` is of bidegree (k, m) and ``eta`` of the target bidegree of Op.
    Exact zero in polynomial mode; O(h²) in grid mode.
    """
    if which == "H":
        lhs = fc.l2_inner(fc.H(psi, plugin), eta)
        rhs = fc.l2_inner(psi, fc.H_star(eta, plugin))
    elif which == "F":
        lhs = fc.l2_inner(fc.F(psi, plugin), eta)
        rhs = fc.l2_inner(psi, fc.F_star(eta, plugin))
    else:
        raise DomainError(f"unknown operator {which!r}; expected H or F")
    return lhs - rhs - boundary_pairing(psi, eta, which)


def trace_to_json(trace: BoundaryTrace) -> dict:
    return trace.to_json()
