from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from doubleforms import fiber_algebra as fa
from doubleforms import symbol_ellipticity as se
from doubleforms.fiber_algebra import DomainError

bidegrees = st.integers(2, 4).flatmap(lambda d: st.tuples(st.just(d), st.integers(0, d), st.integers(0, d)))
covectors = st.lists(st.fractions(-3, 3, max_denominator=4), min_size=4, max_size=4).filter(lambda v: any(v))


def unit_tangent(d, seed):
    xi = se.tangential_samples(d, 4, seed)[-1]
    return xi


# principal symbols

@given(bidegrees, covectors)
def test_bilaplacian_symbol_is_norm_to_the_fourth(dkm, xi):
    d, k, m = dkm
    xi = xi[:d]
    if not any(xi):
        xi[0] = Fraction(1)
    P = se.principal_symbol("B", d, k, m, xi)
    n2 = sum(c * c for c in xi)
    assert np.array_equal(P.real, np.eye(fa.fiber_dim(d, k, m), dtype=object) * n2**2)


def test_H_symbol_of_scalar_along_dx1():
    P = se.principal_symbol("H", 2, 0, 0, [1, 0])
    assert P.target == (1, 1)
    assert np.allclose(P.matrix[:, 0], [-1, 0, 0, 0])


def test_first_order_symbols_are_wedge_and_interior():
    xi = [Fraction(1), Fraction(2), Fraction(-1)]
    Pd = se.principal_symbol("d", 3, 1, 1, xi)
    Pdelta = se.principal_symbol("delta", 3, 1, 1, xi)
    assert np.array_equal(Pd.real, se.wedge_matrix(3, 1, 1, xi))
    assert np.array_equal(Pdelta.real, -se.interior_matrix(3, 1, 1, xi))


@given(bidegrees, covectors)
def test_four_compositions_sum_to_bilaplacian_symbol(dkm, xi):
    d, k, m = dkm
    xi = xi[:d]
    if not any(xi):
        xi[-1] = Fraction(1)
    P = lambda op, kk, mm: se.principal_symbol(op, d, kk, mm, xi)  # noqa: E731
    N = fa.fiber_dim(d, k, m)
    total = np.zeros((N, N), dtype=complex)
    pairs = [("H", "Hstar", (k, m)), ("Hstar", "H", (k, m)), ("Fstar", "F", (k, m)), ("F", "Fstar", (k, m))]
    for outer, inner, (kk, mm) in pairs:
        a = P(inner, kk, mm)
        if not fa.in_range(d, *a.target):
            continue
        comp = P(outer, *a.target).compose(a)
        total = total + comp.matrix
    n2 = float(sum(c * c for c in xi))
    assert np.allclose(total, n2**2 * np.eye(N))


@pytest.mark.parametrize("op", ["H", "Hstar", "F", "Fstar", "d", "delta_v"])
def test_symbol_matches_direct_assembly_from_field_operators(op):
    d, k, m = 3, 1, 1
    xi = [Fraction(1, 2), Fraction(-2, 3), 0]
    assert se.interior_symbol(op, d, k, m, xi).equals(se.assembled_symbol(op, d, k, m, xi))


@pytest.mark.parametrize("row", [("T", None), ("Ptt", "Hstar"), ("T", "Hstar"), ("Fb", "Fstar"), ("Tstar", "H")])
def test_boundary_symbols_match_direct_assembly(row):
    d, k, m = 3, 1, 1
    xi = [Fraction(3, 5), Fraction(4, 5), 0]
    assert se.boundary_symbol(row, d, k, m, xi).equals(se.assembled_symbol(row, d, k, m, xi))


def test_compose_rejects_mismatched_bidegrees():
    a = se.principal_symbol("H", 2, 0, 0, [1, 0])
    with pytest.raises(DomainError):
        a.compose(a)


def test_zero_covector_rejected():
    with pytest.raises(DomainError):
        se.principal_symbol("H", 2, 0, 0, [0, 0])


def test_unknown_operator_rejected():
    with pytest.raises(DomainError):
        se.principal_symbol("G", 2, 0, 0, [1, 0])


# Lopatinskij-Shapiro system

def test_ls_system_shape_d3_11():
    system = se.ls_system(3, 1, 1, "TT", unit_tangent(3, 0))
    assert system.xi_matrix.shape == (18, 18)


@pytest.mark.parametrize("xi", [[1.0, 0.0, 0.5], [0.5, 0.5, 0.0]])
def test_ls_system_rejects_bad_covector(xi):
    with pytest.raises(DomainError):
        se.ls_system(3, 1, 1, "TT", xi)


@given(bidegrees, st.sampled_from(se.FULL_SETS))
def test_ls_system_is_square(dkm, name):
    d, k, m = dkm
    system = se.ls_system(d, k, m, name, unit_tangent(d, 1))
    assert system.xi_matrix.shape == (2 * fa.fiber_dim(d, k, m),) * 2


def test_scalar_sets_reduce_to_two_rows():
    tt = se.nonvanishing_rows(2, 0, 0, "TT")
    nn = se.nonvanishing_rows(2, 0, 0, "NN")
    assert {r for r, live in tt.items() if live} == {"Ptt", "T"}
    assert {r for r, live in nn.items() if live} == {"Pnn.H", "Tstar.H"}


@pytest.mark.parametrize("name", se.FULL_SETS)
def test_ellipticity_d2_11_passes(name):
    assert se.check_regular_ellipticity(2, 1, 1, name, n_samples=16, seed=3).passed


def test_ellipticity_symmetric_snn_d3_passes():
    rep = se.check_regular_ellipticity(3, 1, 1, "SNN", n_samples=16, seed=1)
    assert rep.passed and rep.cols == 12


def test_dropping_a_row_block_fails_with_rank_deficiency():
    rows = [r for r in se.BOUNDARY_SETS["TT"] if r != ("T", "Hstar")]
    rep = se.check_regular_ellipticity(2, 1, 1, rows, n_samples=8)
    assert not rep.passed
    assert rep.rows < rep.cols and rep.rank_deficiency >= 1
    assert rep.failures


def test_ellipticity_report_is_reproducible():
    a = se.check_regular_ellipticity(3, 1, 2, "NT", n_samples=8, seed=4).to_json()
    b = se.check_regular_ellipticity(3, 1, 2, "NT", n_samples=8, seed=4).to_json()
    assert a == b and a["pass"]


def test_n_samples_must_be_positive():
    with pytest.raises(DomainError):
        se.check_regular_ellipticity(2, 0, 0, "TT", n_samples=0)


def test_tangential_samples_are_unit_and_tangent():
    xs = se.tangential_samples(4, 32, 0)
    assert np.allclose(np.linalg.norm(xs, axis=1), 1.0)
    assert np.all(xs[:, -1] == 0)


# dimension audit

def test_audit_d3_11_totals_18():
    audit = se.dimension_audit(3, 1, 1, "TT")
    assert audit.total == 18 and audit.matches


def test_audit_scalar_totals_2():
    assert se.dimension_audit(2, 0, 0, "NN").total == 2


def test_audit_symmetric_d3_k1_totals_12():
    audit = se.dimension_audit(3, 1, 1, "STT")
    assert audit.total == comb(3, 1) * (comb(3, 1) + 1) == 12 and audit.matches


@given(bidegrees, st.sampled_from(se.FULL_SETS))
def test_audit_matches_for_every_set(dkm, name):
    assert se.dimension_audit(*dkm, name).matches


# proof replay

@pytest.mark.parametrize("seed", range(4))
def test_proof_trace_d3_11(seed):
    xi = unit_tangent(3, seed)
    trace = se.proof_trace(3, 1, 1, xi)
    assert trace.passed()
    assert all(r == n for r, n in trace.zeroth_ranks.values())
    assert trace.min_eigenvalue >= 2 - 1e-6
    assert max(trace.projection_norms.values()) <= 1 + 1e-9


def test_proof_trace_spectrum_is_three_and_four():
    trace = se.proof_trace(3, 1, 1, unit_tangent(3, 2))
    eig = np.round(trace.reduced_eigenvalues, 8)
    assert set(eig) <= {3.0, 4.0}
