import numpy as np
import pytest
from numpy.polynomial import legendre as L
from numpy.polynomial import polynomial as P

from doubleforms import elliptic_solver as es
from doubleforms import field_calculus as fc
from doubleforms import fiber_algebra as fa
from doubleforms.fiber_algebra import DomainError
from doubleforms.field_calculus import DoubleFormField, FlatDomain, ZeroOrderPlugin

SCALAR = ((), ())


def trig(d, k, m, seed):
    """Smooth callable coefficients sin(a·x + p), one per basis key."""
    rng = np.random.default_rng(seed)
    out = {}
    for b in fa.enumerate_basis(d, k, m):
        a = rng.uniform(0.5, 2.0, size=d)
        p = rng.uniform()
        out[b] = lambda *X, a=a, p=p: np.sin(sum(ai * x for ai, x in zip(a, X)) + p)
    return out


def compact(coeffs, power=3):
    bump = lambda x, y: (x * (1 - x) * y * (1 - y)) ** power  # noqa: E731
    return {key: (lambda *X, f=f: f(*X) * bump(*X)) for key, f in coeffs.items()}


@pytest.fixture(scope="module")
def ctx16():
    return es.SolverContext(FlatDomain(2, grid=16))


@pytest.fixture(scope="module")
def ctx32():
    return es.SolverContext(FlatDomain(2, grid=32))


# assembly

def test_scalar_B_is_thirteen_point_bilaplacian(ctx16):
    B = ctx16.assembly(0, 0).B.toarray()
    n, h = 17, 1 / 16
    hand = np.zeros((5, 5))
    hand[2, 2] = 20
    hand[1, 2] = hand[3, 2] = hand[2, 1] = hand[2, 3] = -8
    hand[1, 1] = hand[1, 3] = hand[3, 1] = hand[3, 3] = 2
    hand[0, 2] = hand[4, 2] = hand[2, 0] = hand[2, 4] = 1
    for i in range(2, n - 2):
        for j in range(2, n - 2):
            row = B[i * n + j].reshape(n, n) * h**4
            window = np.zeros((n + 4, n + 4))
            window[2:-2, 2:-2] = row
            assert np.allclose(window[i:i + 5, j:j + 5], hand)
            assert np.isclose(np.abs(row).sum(), np.abs(hand).sum())


def test_B_is_the_sum_of_the_four_products(ctx16):
    A = ctx16.assembly(1, 1)
    lay = A.layout
    total = sum(o.matrix @ i.target.extension @ i.matrix @ lay.extension
                for o, i in A.B_factors() if i.matrix.shape[0])
    assert abs(total - A.B).max() == 0


@pytest.mark.parametrize("k,m,op", [(0, 0, "H"), (1, 1, "H"), (1, 1, "F")])
def test_discrete_adjointness_is_second_order(k, m, op):
    dk, dm = es._SHIFT[op]
    errs = []
    for n in (16, 32, 64):
        ctx = es.SolverContext(FlatDomain(2, grid=n))
        A = ctx.assembly(k, m)
        fwd = A.ops[op]
        back = ctx.assembly(k + dk, m + dm).ops[es._INVERSE[op]]
        psi = ctx.field(k, m, trig(2, k, m, 1))
        eta = ctx.field(k + dk, m + dm, compact(trig(2, k + dk, m + dm, 2)))
        lhs = np.dot(fwd.target.weights * (fwd.matrix @ psi.ext), eta.values)
        rhs = np.dot(A.layout.weights * psi.values, back.matrix @ eta.ext)
        errs.append(abs(lhs - rhs))
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(slopes >= 1.9), slopes


@pytest.mark.parametrize("k,m,inner,outer", [
    (0, 0, "H", "H"), (0, 0, "H", "F"), (0, 0, "H", "Fstar"), (0, 1, "H", "F"), (1, 0, "Fstar", "H"),
])
def test_discrete_exactness_is_second_order(k, m, inner, outer):
    errs = []
    for n in (16, 32, 64):
        ctx = es.SolverContext(FlatDomain(2, grid=n))
        first = ctx.assembly(k, m).ops[inner]
        mid = first.target
        second = ctx.assembly(mid.k, mid.m).ops[outer]
        psi = ctx.field(k, m, trig(2, k, m, 4))
        errs.append(np.abs(second.matrix @ (mid.extension @ (first.matrix @ psi.ext))).max())
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(slopes >= 1.9), slopes


def test_plugin_adds_only_zero_order_blocks():
    dom = FlatDomain(2, grid=12)
    plain = es.assemble(dom, 0, 0)
    plug = es.assemble(dom, 0, 0, ZeroOrderPlugin(2, D=fa.g_wedge))
    psi = es.as_discrete(plain.layout, trig(2, 0, 0, 5))
    diff = (plug.ops["H"].matrix - plain.ops["H"].matrix) @ psi.ext
    expected = es.as_discrete(plain.ops["H"].target, {
        ((1,), (1,)): next(iter(trig(2, 0, 0, 5).values())),
        ((2,), (2,)): next(iter(trig(2, 0, 0, 5).values())),
    })
    assert np.allclose(diff, expected.values)
    for op in ("Hstar", "F", "Fstar"):
        assert (plug.ops[op].matrix - plain.ops[op].matrix).count_nonzero() == 0


def test_assembly_guardrails():
    with pytest.raises(DomainError):
        es.assemble(FlatDomain(2, grid=6), 0, 0)
    with pytest.raises(es.ResourceError):
        es.assemble(FlatDomain(2, grid=32), 1, 1, max_unknowns=1000)
    with pytest.raises(DomainError):
        es.SolverContext(FlatDomain(2, kind="torus", grid=16)).assembly(0, 0)


# solves

def ritz_plate_centre(p=8):
    """Centre deflection of the unit clamped plate under unit load by a
    Galerkin method on x²(1−x)²y²(1−y)²·Legendre products."""
    b = P.polymul([0, 0, 1], [1, -2, 1])
    basis = []
    for i in range(p):
        leg = L.leg2poly([0] * i + [1])
        shifted = np.zeros(1)
        for deg, c in enumerate(leg):
            shifted = P.polyadd(shifted, c * P.polypow([-1, 2], deg))
        basis.append(P.polymul(b, shifted))
    x, w = L.leggauss(2 * p + 12)
    x, w = (x + 1) / 2, w / 2
    V = [np.array([P.polyval(x, P.polyder(f, r)) for f in basis]) for r in range(3)]
    M = lambda r, s: (V[r] * w) @ V[s].T  # noqa: E731
    K = np.kron(M(2, 2), M(0, 0)) + np.kron(M(0, 0), M(2, 2)) + np.kron(M(0, 2), M(2, 0)) + np.kron(M(2, 0), M(0, 2))
    f = np.kron(V[0] @ w, V[0] @ w)
    c = np.linalg.solve(K, f)
    v = np.array([P.polyval(0.5, q) for q in basis])
    return float(np.kron(v, v) @ c)


def test_ritz_oracle_is_converged():
    assert abs(ritz_plate_centre(6) - ritz_plate_centre(8)) < 1e-7


def test_clamped_plate_under_unit_load_matches_galerkin_oracle():
    ctx = es.SolverContext(FlatDomain(2, grid=64))
    res = es.solve("TT", {SCALAR: 1.0}, context=ctx)
    centre = res.psi.component(SCALAR)[32, 32]
    ref = ritz_plate_centre()
    assert abs(centre - ref) / ref < 1e-2
    assert res.residual <= es.DEFAULT_TOL and res.kernel_dimension == 0


def test_kernel_direction_load_is_projected_out(ctx16):
    res = es.solve("NN", {SCALAR: lambda x, y: 1 + x}, context=ctx16)
    load = ctx16.field(0, 0, {SCALAR: lambda x, y: 1 + x})
    assert res.projection_removed == pytest.approx(load.norm(), rel=1e-10)
    assert res.psi.norm() < 1e-10
    assert ctx16.system(0, 0, "NN").projection(res.psi).norm() < 1e-12


def test_solution_is_orthogonal_to_kernel(ctx16):
    res = es.solve("NN", trig(2, 0, 0, 6), context=ctx16)
    assert ctx16.system(0, 0, "NN").projection(res.psi).norm() < 1e-10 * res.psi.norm()
    assert res.projection_removed > 0


def test_symmetric_load_gives_symmetric_solution(ctx16):
    co = trig(2, 1, 1, 7)
    sym = {((1,), (1,)): co[((1,), (1,))], ((2,), (2,)): co[((2,), (2,))],
           ((1,), (2,)): co[((1,), (2,))], ((2,), (1,)): co[((1,), (2,))]}
    res = es.solve("TT", sym, context=ctx16, k=1, m=1)
    psi = res.psi
    assert np.allclose(psi.transpose().values, psi.values, atol=10 * es.DEFAULT_TOL * np.abs(psi.values).max())


def test_lift_boundary_data_reproduces_a_smooth_solution(ctx32):
    exact = {SCALAR: lambda x, y: np.cos(x) * np.exp(y)}
    # B exp(y) cos(x) = 0, so the lift alone determines the solution
    res = es.solve("TT", {SCALAR: 0.0}, context=ctx32, bc={"lift": exact})
    ref = ctx32.field(0, 0, exact)
    assert np.abs(res.psi.values - ref.values).max() < 1e-3
    assert res.constraint_residual < 1e-10


def test_cg_matches_direct(ctx16):
    chi = trig(2, 0, 0, 8)
    a = es.solve("TT", chi, context=ctx16, method="direct")
    b = es.solve("TT", chi, context=ctx16, method="cg", tol=1e-10)
    assert np.allclose(a.psi.values, b.psi.values, atol=1e-7 * np.abs(a.psi.values).max())


def test_unknown_family(ctx16):
    with pytest.raises(DomainError):
        ctx16.system(0, 0, "XY")


# Green operators

@pytest.mark.parametrize("family", ["TT", "NN", "NT", "TN"])
def test_green_residual_small_for_random_load(ctx16, family):
    system = ctx16.system(1, 1, family)
    psi = ctx16.field(1, 1, trig(2, 1, 1, 9))
    u = system.green(psi)
    assert system.green_residual(psi, u) <= es.DEFAULT_TOL


def test_green_annihilates_kernel(ctx16):
    system = ctx16.system(0, 0, "NN")
    for y in system.kernel().basis:
        assert system.green(y).norm() < 1e-10


def test_green_is_linear(ctx16):
    a = ctx16.field(0, 0, trig(2, 0, 0, 10))
    b = ctx16.field(0, 0, trig(2, 0, 0, 11))
    G = lambda f: es.green_apply("TT", f, ctx16)  # noqa: E731
    lhs = G(2.0 * a + (-3.0) * b)
    rhs = 2.0 * G(a) + (-3.0) * G(b)
    assert (lhs - rhs).norm() <= 1e-9 * rhs.norm()


def test_transpose_equivariance_of_green_operators(ctx16):
    psi = trig(2, 1, 1, 12)
    for family in ("TT", "NN", "NT"):
        assert es.transpose_defect(family, psi, ctx16, k=1, m=1) <= 10 * es.DEFAULT_TOL


# kernels

def test_scalar_kernel_dimensions_are_stable():
    nn = es.kernel_dimension("NN", 2, 0, 0, grids=(12, 16))
    tt = es.kernel_dimension("TT", 2, 0, 0, grids=(12, 16))
    assert nn.dimension == 3 and nn.stable and not nn.inconclusive
    assert tt.dimension == 0 and tt.stable


def test_nn_kernel_spans_affine_functions(ctx16):
    system = ctx16.system(0, 0, "NN")
    for f in (lambda x, y: 1 + 0 * x, lambda x, y: x, lambda x, y: y):
        g = ctx16.field(0, 0, {SCALAR: f})
        assert (g - system.projection(g)).norm() < 1e-8 * g.norm()


def test_kernel_guardrail(ctx16):
    with pytest.raises(es.ResourceError):
        ctx16.system(0, 0, "TT").kernel(threshold=1.0, max_unknowns=10)


def test_kernel_report_json(ctx16):
    data = ctx16.system(0, 0, "NN").kernel().to_json()
    assert data["dimension"] == 3 and data["family"] == "NN"


# decomposition

def test_decomposition_of_curl_curl_potential_is_pure_EE(ctx32):
    # ψ = H α with α a bump supported away from the boundary
    dom = FlatDomain(2)
    alpha = DoubleFormField.from_polys(dom, 0, 0, {SCALAR: fc.bump(dom, 3)})
    psi = fc.H(alpha)
    res = es.decompose(DoubleFormField(ctx32.domain, psi.value), ctx32)
    n = res.norm
    assert (res.EE - ctx32.field(1, 1, DoubleFormField(ctx32.domain, psi.value))).norm() <= 5e-2 * n
    for part in (res.CC, res.EC, res.CE, res.BH):
        assert part.norm() <= 5e-2 * n


def test_decomposition_of_affine_scalar_is_pure_BH(ctx32):
    psi = {SCALAR: lambda x, y: 1 + x}
    res = es.decompose(psi, ctx32, k=0, m=0)
    f = ctx32.field(0, 0, psi)
    assert (res.BH - f).norm() <= 1e-8 * f.norm()
    for part in (res.EE, res.CC, res.EC, res.CE):
        assert part.norm() <= 1e-8 * f.norm()


@pytest.mark.parametrize("k,m", [(0, 0), (1, 1), (0, 1)])
def test_decomposition_of_random_field_is_orthogonal(ctx32, k, m):
    res = es.decompose(trig(2, k, m, 13), ctx32, k=k, m=m)
    assert res.relative_residual <= 5e-2
    assert res.relative_offdiagonal <= 5e-2
    recon = sum(res.parts[1:], res.parts[0])
    f = ctx32.field(k, m, trig(2, k, m, 13))
    assert (recon - f).norm() <= 5e-2 * f.norm()
    assert set(res.to_json()["part_norms"]) == set(es.DecompositionResult.NAMES)


def test_decomposition_refuses_plugin():
    ctx = es.SolverContext(FlatDomain(2, grid=8), plugin=ZeroOrderPlugin(2))
    with pytest.raises(DomainError):
        es.decompose({SCALAR: 1.0}, ctx, k=0, m=0)


def test_biharmonic_projection_is_idempotent(ctx16):
    f = ctx16.field(1, 1, trig(2, 1, 1, 14))
    p = ctx16.biharmonic_projection(f)
    q = ctx16.biharmonic_projection(p)
    assert (p - q).norm() <= 1e-6 * p.norm()
    A = ctx16.assembly(1, 1)
    assert np.sqrt(np.dot(A.stacked_weights, (A.stacked @ p.ext) ** 2)) <= 1e-8 * f.norm()


# splitting of the biharmonic module

def test_bh_split_scalar_nn_is_all_kernel(ctx16):
    split = es.bh_split("NN", ctx16)
    assert (split.dimension, split.kernel_dimension, split.complement_dimension) == (3, 3, 0)
    assert split.orthogonality <= 1e-8


def test_bh_split_scalar_tt_is_all_complement(ctx16):
    split = es.bh_split("TT", ctx16)
    assert (split.dimension, split.kernel_dimension, split.complement_dimension) == (3, 0, 3)
    assert split.orthogonality <= 1e-8
    assert split.to_json()["family"] == "TT"


# Korn-type constant

def test_korn_ratio_is_scale_invariant(ctx16):
    system = ctx16.system(0, 0, "TT")
    u = system.green(ctx16.field(0, 0, trig(2, 0, 0, 15)))
    assert es.korn_ratio(system, u) == pytest.approx(es.korn_ratio(system, 2.0 * u), rel=1e-12)


def test_korn_ratio_on_kernel_uses_projection_only(ctx16):
    system = ctx16.system(0, 0, "NN")
    for y in system.kernel().basis:
        r = es.korn_ratio(system, y)
        # for unit-norm affine y the ratio is 1 + ‖∇y‖², at most 13 on the unit square
        assert np.isfinite(r) and 1 <= r <= 13 * 1.05
        assert r == pytest.approx(es.sobolev_norm(y) ** 2 / system.projection(y).norm() ** 2, rel=1e-6)


def test_korn_constant_is_finite(ctx16):
    rep = es.korn_constant("TT", ctx16, count=3)
    assert np.isfinite(rep.constant) and rep.constant >= 1.0 - 1e-9
    assert rep.to_json()["samples"] == len(rep.ratios)


def test_sobolev_norm_of_affine_function(ctx16):
    f = ctx16.field(0, 0, {SCALAR: lambda x, y: x})
    # ∫x² + ∫1 on the unit square
    assert es.sobolev_norm(f) == pytest.approx(np.sqrt(1 / 3 + 1), rel=1e-3)


# plate study and problem files

def test_plate_study_orders_and_csv():
    study = es.clamped_plate_study(grids=(8, 16, 32))
    assert all(o >= 1.8 for o in study.orders)
    lines = study.to_csv().splitlines()
    assert lines[0] == "h,err,order" and len(lines) == 4


def _problem(**extra):
    dom = FlatDomain(2)
    rhs = DoubleFormField.from_polys(dom, 0, 0, {SCALAR: 1})
    data = {"domain": {"d": 2, "kind": "box", "grid": 16}, "k": 0, "m": 0, "family": "TT",
            "rhs": fc.field_to_json(rhs), "tol": 1e-9}
    data.update(extra)
    return data


def test_problem_file_round_trip():
    problem = es.load_problem(_problem())
    res = es.run_problem(problem)
    assert res.residual <= 1e-9 and res.psi.values.max() > 0


def test_problem_with_lift():
    dom = FlatDomain(2)
    x, y = dom.ring.gens
    lift = DoubleFormField.from_polys(dom, 0, 0, {SCALAR: x * y})
    problem = es.load_problem(_problem(rhs=fc.field_to_json(DoubleFormField.zero(dom, 0, 0)),
                                       bc={"lift": fc.field_to_json(lift)}))
    res = es.run_problem(problem)
    ref = problem.context.field(0, 0, DoubleFormField(problem.context.domain, lift.value))
    assert np.abs(res.psi.values - ref.values).max() < 1e-8


@pytest.mark.parametrize("bad", [{"family": "XX"}, {"bc": {"dirichlet": 1}}, {"k": 1}])
def test_problem_validation(bad):
    with pytest.raises(DomainError):
        es.load_problem(_problem(**bad))


def test_problem_missing_key():
    data = _problem()
    del data["rhs"]
    with pytest.raises(DomainError):
        es.load_problem(data)
