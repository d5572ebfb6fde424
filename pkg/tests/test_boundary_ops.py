import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from doubleforms import boundary_ops as bo
from doubleforms import field_calculus as fc
from doubleforms import fiber_algebra as fa
from doubleforms.boundary_ops import Face
from doubleforms.fiber_algebra import DomainError, DoubleForm, MultiIndexPair
from doubleforms.field_calculus import DoubleFormField, FlatDomain


def mp(i, j):
    return MultiIndexPair(tuple(i), tuple(j))


def field_at(seed, d, k, m, degree=3):
    return fc.random_field(FlatDomain(d), k, m, random.Random(seed), degree)


cases = st.integers(2, 3).flatmap(
    lambda d: st.tuples(
        st.just(d), st.integers(0, d), st.integers(0, d), st.integers(0, 10**6),
        st.integers(1, d), st.integers(0, 1),
    )
)


def constant_field(d, k, m, key):
    dom = FlatDomain(d)
    return DoubleFormField(dom, DoubleForm(d, k, m, {key: dom.ring(1)}))


# projections

def test_normal_normal_part_of_dx1_dx1():
    tr = bo.face_projections(constant_field(2, 1, 1, mp((1,), (1,))), Face(1, 0))
    assert tr.nn.value == DoubleForm(1, 0, 0, {mp((), ()): tr.nn.domain.ring(1)})
    assert tr.tt.is_zero() and tr.tn.is_zero() and tr.nt.is_zero()


def test_tn_part_of_dx2_dx1():
    tr = bo.face_projections(constant_field(2, 1, 1, mp((2,), (1,))), Face(1, 0))
    assert tr.tn.value == DoubleForm(1, 1, 0, {mp((1,), ()): tr.tn.domain.ring(1)})
    assert tr.tt.is_zero() and tr.nt.is_zero() and tr.nn.is_zero()


def test_projections_refuse_torus():
    dom = FlatDomain(2, kind="torus", grid=8)
    psi = DoubleFormField.zero(dom, 1, 1)
    with pytest.raises(DomainError):
        bo.face_projections(psi, Face(1, 0))


@given(cases)
def test_reconstruction_reproduces_restriction(args):
    d, k, m, seed, axis, side = args
    psi = field_at(seed, d, k, m)
    face = Face(axis, side)
    tr = bo.face_projections(psi, face)
    assert tr.reconstruct(d) == bo.restrict(psi, face)


@given(cases)
def test_projection_transpose_identities(args):
    d, k, m, seed, axis, side = args
    psi = field_at(seed, d, k, m)
    face = Face(axis, side)
    psit = fc.transpose(psi)
    assert fc.transpose(bo.P_tn(psit, face)) == bo.P_nt(psi, face)
    assert fc.transpose(bo.P_nt(psit, face)) == bo.P_tn(psi, face)
    assert fc.transpose(bo.P_tt(psit, face)) == bo.P_tt(psi, face)
    assert fc.transpose(bo.P_nn(psit, face)) == bo.P_nn(psi, face)


@given(cases)
def test_boundary_operator_transpose_identities(args):
    d, k, m, seed, axis, side = args
    psi = field_at(seed, d, k, m)
    face = Face(axis, side)
    psit = fc.transpose(psi)
    assert fc.transpose(bo.T_op(psit, face)) == bo.T_op(psi, face)
    assert fc.transpose(bo.T_star_op(psit, face)) == bo.T_star_op(psi, face)
    assert fc.transpose(bo.F_op(psit, face)) == bo.F_star_op(psi, face)
    assert fc.transpose(bo.F_star_op(psit, face)) == bo.F_op(psi, face)


@given(cases)
def test_hodge_exchanges_tangential_and_normal(args):
    d, k, m, seed, axis, side = args
    psi = field_at(seed, d, k, m)
    face = Face(axis, side)
    lhs = bo.P_tt(fc.hodge(psi), face)
    rhs = bo.face_hodge(bo.P_nt(psi, face), face) * (-1) ** (d + 1)
    assert lhs == rhs


# first-order boundary operators

@pytest.mark.parametrize("side", [0, 1])
def test_T_of_scalar_is_inward_normal_derivative(side):
    dom = FlatDomain(2)
    x1, x2 = dom.ring.gens
    f = x1**3 * x2 + x1 * x2**2 + 2 * x1
    psi = DoubleFormField(dom, DoubleForm(2, 0, 0, {mp((), ()): f}))
    face = Face(1, side)
    expected = bo.P_tt(bo.normal_derivative(psi, face), face)
    assert bo.T_op(psi, face) == expected
    (y,) = bo.face_domain(dom, face).ring.gens
    # ∂_1 f = 3 x1^2 x2 + x2^2 + 2, inward on x1 = 0 and outward on x1 = 1
    hand = y**2 + 2 if side == 0 else -(3 * y + y**2 + 2)
    assert bo.T_op(psi, face).coeffs[mp((), ())] == hand


def test_T_star_of_scalar_is_empty():
    psi = field_at(5, 2, 0, 0)
    out = bo.T_star_op(psi, Face(2, 1))
    assert (out.k, out.m) == (-1, -1) and out.is_zero()


@given(cases)
def test_T_matches_flat_face_expansion(args):
    d, k, m, seed, axis, side = args
    psi = field_at(seed, d, k, m)
    face = Face(axis, side)
    assert bo.T_op(psi, face) == bo.T_flat(psi, face)


def test_T_on_quadratic_normal_profile():
    # ψ = x_r^2 g: only the tangential-tangential part sees ∂_r, and it vanishes on x_r = 0
    dom = FlatDomain(3)
    x1 = dom.ring.gens[0]
    g = DoubleFormField.constant(dom, fa.metric(3))
    psi = fc.multiply(g, x1**2)
    face = Face(1, 0)
    assert bo.T_op(psi, face).is_zero()
    psi1 = fc.multiply(g, x1)
    expected = bo.face_projections(g, face).tt
    assert bo.T_op(psi1, face) == expected


@given(cases)
def test_star_duality_of_boundary_operators(args):
    d, k, m, seed, axis, side = args
    psi = field_at(seed, d, k, m)
    res = bo.star_duality_residuals(psi, Face(axis, side))
    assert all(r.is_zero() for r in res.values())


def test_first_order_boundary_rejects_nonsymmetric_h():
    psi = field_at(1, 3, 1, 1)
    h = DoubleForm.basis(2, (1,), (2,), 1)
    with pytest.raises(DomainError):
        bo.first_order_boundary(psi, Face(3, 0), h=h)


def test_first_order_boundary_carries_symmetric_h():
    psi = field_at(1, 3, 1, 1)
    h = fa.metric(2)
    tr = bo.first_order_boundary(psi, Face(3, 0), h=h)
    assert tr.h == h and tr.T == bo.T_op(psi, Face(3, 0))


def test_flat_tangential_commutators_vanish():
    psi = field_at(2, 3, 1, 2)
    res = bo.tangential_commutators(psi, Face(2, 1))
    assert all(r.is_zero() for r in res.values())


# Green formulas

@pytest.mark.parametrize("which,d,k,m", [("H", 2, 0, 0), ("H", 2, 1, 1), ("F", 2, 1, 1), ("F", 3, 1, 2), ("H", 3, 1, 0)])
def test_greens_residual_is_exact_in_polynomial_mode(which, d, k, m):
    dom = FlatDomain(d)
    tk, tm = (k + 1, m + 1) if which == "H" else (k + 1, m - 1)
    psi = field_at(11, d, k, m, degree=2)
    eta = fc.multiply(field_at(12, d, tk, tm, degree=2), bo.edge_weight(dom))
    assert bo.greens_residual(psi, eta, which) == 0


def test_pairing_is_needed_without_boundary_conditions():
    dom = FlatDomain(2)
    psi = field_at(11, 2, 1, 1, degree=2)
    eta = fc.multiply(field_at(12, 2, 2, 2, degree=2), bo.edge_weight(dom))
    assert bo.boundary_pairing(psi, eta, "H") != 0


def test_duality_without_boundary_terms_on_the_kernel_of_Ptt_T():
    dom = FlatDomain(2)
    psi = fc.multiply(field_at(3, 2, 1, 1, degree=2), fc.bump(dom, 2))
    for face in bo.faces(2):
        assert bo.P_tt(psi, face).is_zero() and bo.T_op(psi, face).is_zero()
    eta = field_at(4, 2, 2, 2, degree=3)
    assert fc.l2_inner(fc.H(psi), eta) == fc.l2_inner(psi, fc.H_star(eta))


def _trig(dom, k, m, seed):
    X = dom.coordinates()
    rng = np.random.default_rng(seed)
    coeffs = {}
    for b in fa.enumerate_basis(dom.d, k, m):
        a = rng.uniform(0.5, 2.0, size=dom.d)
        coeffs[b] = np.sin(sum(ai * x for ai, x in zip(a, X)) + rng.uniform())
    return DoubleFormField(dom, DoubleForm(dom.d, k, m, coeffs))


def _edge_samples(dom):
    poly = FlatDomain(dom.d)
    w = DoubleFormField(poly, DoubleForm(dom.d, 0, 0, {mp((), ()): bo.edge_weight(poly)}))
    return fc.sample(w, dom).coeffs[mp((), ())]


@pytest.mark.parametrize("which,k,m", [("H", 0, 0), ("H", 1, 1), ("F", 0, 1), ("F", 1, 1)])
def test_greens_residual_decays_second_order_on_grids(which, k, m):
    tk, tm = (k + 1, m + 1) if which == "H" else (k + 1, m - 1)
    errs = []
    for n in (64, 128, 256):
        dom = FlatDomain(2, grid=n)
        psi = _trig(dom, k, m, 1)
        eta = fc.multiply(_trig(dom, tk, tm, 2), _edge_samples(dom))
        errs.append(abs(bo.greens_residual(psi, eta, which)))
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(slopes >= 1.9), slopes


def test_symmetric_self_pairing_matches_transpose_partner():
    dom = FlatDomain(2)
    psi = fc.multiply(DoubleFormField(dom, fa.symmetrize(field_at(8, 2, 1, 1).value)), bo.edge_weight(dom))
    eta = fc.H(psi)
    r = bo.greens_residual(psi, eta, "H")
    rt = bo.greens_residual(fc.transpose(psi), fc.transpose(eta), "H")
    assert r == rt


def test_greens_residual_unknown_operator():
    psi = field_at(0, 2, 1, 1)
    with pytest.raises(DomainError):
        bo.greens_residual(psi, psi, "B")


# serialization

def test_trace_json_has_face_header():
    tr = bo.face_projections(field_at(2, 3, 1, 1), Face(2, 1))
    data = bo.trace_to_json(tr)
    assert data["face"] == {"axis": 2, "side": 1}
    assert Face.from_json(data["face"]) == Face(2, 1)
    assert fc.field_from_json(data["nn"]) == tr.nn
