"""Exact verification of the algebraic and differential identity lattice.

Every check compares two exactly computed polynomial fields (or fiber
values) for literal equality, so a pass means a zero residual, not a small one.
"""

from __future__ import annotations

import random
import time
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field
from fractions import Fraction

from . import boundary_ops as bo
from . import fiber_algebra as fa
from . import field_calculus as fc
from .fiber_algebra import DoubleForm
from .field_calculus import DoubleFormField, FlatDomain


@dataclass
class IdentityCheck:
    name: str
    d: int
    k: int
    m: int
    sample: int
    passed: bool


@dataclass
class IdentityReport:
    seed: int
    d_max: int
    degree_cap: int
    n_fields: int
    checks: list[IdentityCheck] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[IdentityCheck]:
        return [c for c in self.checks if not c.passed]

    def counts(self) -> dict[str, tuple[int, int]]:
        total, ok = Counter(), Counter()
        for c in self.checks:
            total[c.name] += 1
            ok[c.name] += c.passed
        return {name: (ok[name], total[name]) for name in sorted(total)}

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "d_max": self.d_max,
            "degree_cap": self.degree_cap,
            "n_fields": self.n_fields,
            "n_checks": len(self.checks),
            "pass": self.passed,
            "identities": {name: {"passed": ok, "total": n} for name, (ok, n) in self.counts().items()},
            "failures": [
                {"name": c.name, "d": c.d, "k": c.k, "m": c.m, "sample": c.sample} for c in self.failures[:50]
            ],
        }


@dataclass
class _Context:
    rng: random.Random
    domain: FlatDomain
    degree: int

    def field(self, k: int, m: int) -> DoubleFormField:
        if not fa.in_range(self.domain.d, k, m):
            return DoubleFormField.zero(self.domain, k, m)
        return fc.random_field(self.domain, k, m, self.rng, self.degree)

    def any_field(self) -> DoubleFormField:
        d = self.domain.d
        return self.field(self.rng.randint(0, d), self.rng.randint(0, d))

    def fiber(self, k: int, m: int) -> DoubleForm:
        d = self.domain.d
        vals = [Fraction(self.rng.randint(-4, 4)) for _ in range(fa.fiber_dim(d, k, m))]
        return DoubleForm.from_vector(d, k, m, vals)

    def symmetric(self, l: int) -> DoubleForm:
        return fa.symmetrize(self.fiber(l, l))

    def vector(self) -> list[Fraction]:
        return [Fraction(self.rng.randint(-4, 4)) for _ in range(self.domain.d)]


Check = Callable[[DoubleFormField, _Context], bool]
_CHECKS: list[tuple[str, Check]] = []


def identity(name: str):
    def register(fn: Check) -> Check:
        _CHECKS.append((name, fn))
        return fn

    return register


def identity_names() -> list[str]:
    return [name for name, _ in _CHECKS]


# --------------------------------------------------------------------------
# Pointwise algebra

X = fc.transpose
st = fc.hodge


def _sv(p):
    return fc.hodge(p, "vector")


@identity("hodge_star_wedge_one_form")
def _(p, ctx):
    alpha = ctx.field(1, 0)
    vec = [alpha.coeffs.get(fa.MultiIndexPair((i,), ()), 0) for i in range(1, p.d + 1)]
    lhs = st(fc.wedge(alpha, p))
    rhs = fc.field_interior(vec, st(p)) * (-1) ** p.k
    return lhs == rhs


@identity("trace_wedge_duality")
def _(p, ctx):
    gv = ctx.symmetric(ctx.rng.randint(1, min(3, p.d)))
    l = gv.k
    if not fa.in_range(p.d, p.k - l, p.m - l):
        return fa.a_operator_family(gv, p.value, "trace").is_zero()
    phi = ctx.fiber(p.k - l, p.m - l)
    pv = p.value
    return fa.inner(fa.a_operator_family(gv, pv, "trace"), phi) == fa.inner(pv, fa.wedge(gv, phi))


@identity("interior_A_duality")
def _(p, ctx):
    A = ctx.symmetric(ctx.rng.randint(1, min(3, p.d)))
    l = A.k
    if not fa.in_range(p.d, p.k - l, p.m + l):
        return fa.a_operator_family(A, p.value, "i_star").is_zero()
    phi = ctx.fiber(p.k - l, p.m + l)
    return fa.inner(fa.a_operator_family(A, p.value, "i_star"), phi) == fa.inner(
        p.value, fa.a_operator_family(A, phi, "i")
    )


@identity("trace_A_transpose")
def _(p, ctx):
    A = ctx.symmetric(ctx.rng.randint(1, min(3, p.d)))
    return fc.transpose(fc.a_operator(A, p, "trace")) == fc.a_operator(A, X(p), "trace")


@identity("interior_A_transpose")
def _(p, ctx):
    A = ctx.symmetric(ctx.rng.randint(1, min(3, p.d)))
    return fc.transpose(fc.a_operator(A, p, "i")) == fc.a_operator(A, X(p), "i_star")


@identity("bianchi_is_i_g")
def _(p, ctx):
    expected = DoubleFormField.zero(p.domain, p.k + 1, p.m - 1)
    for i in range(1, p.d + 1):
        e = fa.coordinate_vector(p.d, i)
        expected = expected + fc.wedge(DoubleForm.basis(p.d, (i,), ()), fc.field_interior(e, p, "vector"))
    return fc.bianchi(p) == expected


@identity("bianchi_v_is_i_star_g")
def _(p, ctx):
    expected = DoubleFormField.zero(p.domain, p.k - 1, p.m + 1)
    for i in range(1, p.d + 1):
        e = fa.coordinate_vector(p.d, i)
        expected = expected + fc.wedge(DoubleForm.basis(p.d, (), (i,)), fc.field_interior(e, p, "form"))
    return fc.bianchi_v(p) == expected


@identity("trace_g_is_double_contraction")
def _(p, ctx):
    expected = DoubleFormField.zero(p.domain, p.k - 1, p.m - 1)
    for i in range(1, p.d + 1):
        e = fa.coordinate_vector(p.d, i)
        expected = expected + fc.field_interior(e, fc.field_interior(e, p, "form"), "vector")
    return fc.trace_g(p) == expected


@identity("hodge_commutes_vector_hodge")
def _(p, ctx):
    return st(_sv(p)) == _sv(st(p))


# --------------------------------------------------------------------------
# First-order calculus

@identity("d_commutes_vector_hodge")
def _(p, ctx):
    return fc.d(_sv(p)) == _sv(fc.d(p))


@identity("dV_commutes_hodge")
def _(p, ctx):
    return fc.d_v(st(p)) == st(fc.d_v(p))


@identity("dd_zero")
def _(p, ctx):
    return fc.d(fc.d(p)).is_zero() and fc.d_v(fc.d_v(p)).is_zero()


@identity("delta_delta_zero")
def _(p, ctx):
    return fc.delta(fc.delta(p)).is_zero() and fc.delta_v(fc.delta_v(p)).is_zero()


@identity("delta_v_trace_formula")
def _(p, ctx):
    return fc.delta_v(p) == -(fc.trace_g(fc.d(p)) + fc.d(fc.trace_g(p)))


@identity("delta_trace_formula")
def _(p, ctx):
    return fc.delta(p) == -(fc.trace_g(fc.d_v(p)) + fc.d_v(fc.trace_g(p)))


@identity("bianchi_anticommutes_d")
def _(p, ctx):
    return fc.bianchi(fc.d(p)) == -fc.d(fc.bianchi(p))


@identity("bianchi_v_anticommutes_dV")
def _(p, ctx):
    return fc.bianchi_v(fc.d_v(p)) == -fc.d_v(fc.bianchi_v(p))


@identity("trace_anticommutes_delta")
def _(p, ctx):
    return fc.trace_g(fc.delta(p)) == -fc.delta(fc.trace_g(p))


@identity("trace_anticommutes_delta_v")
def _(p, ctx):
    return fc.trace_g(fc.delta_v(p)) == -fc.delta_v(fc.trace_g(p))


@identity("d_from_bianchi")
def _(p, ctx):
    return fc.d(p) == fc.bianchi(fc.d_v(p)) + fc.d_v(fc.bianchi(p))


@identity("d_from_g_wedge")
def _(p, ctx):
    return fc.d(p) == -(fc.delta_v(fc.g_wedge(p)) + fc.g_wedge(fc.delta_v(p)))


@identity("dV_from_bianchi_v")
def _(p, ctx):
    return fc.d_v(p) == fc.bianchi_v(fc.d(p)) + fc.d(fc.bianchi_v(p))


@identity("dV_from_g_wedge")
def _(p, ctx):
    return fc.d_v(p) == -(fc.delta(fc.g_wedge(p)) + fc.g_wedge(fc.delta(p)))


@identity("d_anticommutes_g_wedge")
def _(p, ctx):
    return fc.d(fc.g_wedge(p)) == -fc.g_wedge(fc.d(p)) and fc.d_v(fc.g_wedge(p)) == -fc.g_wedge(fc.d_v(p))


@identity("commutator_d_dV")
def _(p, ctx):
    lhs = fc.d(fc.d_v(p)) - fc.d_v(fc.d(p))
    rhs = fc.d(fc.d(fc.bianchi_v(p))) - fc.bianchi_v(fc.d(fc.d(p)))
    return lhs == rhs and lhs.is_zero()


@identity("commutator_delta_dV")
def _(p, ctx):
    lhs = fc.delta(fc.d_v(p)) - fc.d_v(fc.delta(p))
    rhs = fc.d_v(fc.d_v(fc.trace_g(p))) - fc.trace_g(fc.d_v(fc.d_v(p)))
    return lhs == rhs


@identity("leibniz_d")
def _(p, ctx):
    q = ctx.any_field()
    return fc.d(fc.wedge(p, q)) == fc.wedge(fc.d(p), q) + fc.wedge(p, fc.d(q)) * (-1) ** p.k


@identity("leibniz_dV")
def _(p, ctx):
    q = ctx.any_field()
    return fc.d_v(fc.wedge(p, q)) == fc.wedge(fc.d_v(p), q) + fc.wedge(p, fc.d_v(q)) * (-1) ** p.m


@identity("leibniz_interior")
def _(p, ctx):
    q, x = ctx.any_field(), ctx.vector()
    ok = fc.field_interior(x, fc.wedge(p, q)) == fc.wedge(fc.field_interior(x, p), q) + fc.wedge(
        p, fc.field_interior(x, q)
    ) * (-1) ** p.k
    okv = fc.field_interior(x, fc.wedge(p, q), "vector") == fc.wedge(fc.field_interior(x, p, "vector"), q) + fc.wedge(
        p, fc.field_interior(x, q, "vector")
    ) * (-1) ** p.m
    return ok and okv


@identity("leibniz_dV_d")
def _(p, ctx):
    q = ctx.any_field()
    k, m = p.k, p.m
    lhs = fc.d_v(fc.d(fc.wedge(p, q)))
    rhs = (
        fc.wedge(fc.d_v(fc.d(p)), q)
        + fc.wedge(fc.d_v(p), fc.d(q)) * (-1) ** k
        + fc.wedge(fc.d(p), fc.d_v(q)) * (-1) ** m
        + fc.wedge(p, fc.d_v(fc.d(q))) * (-1) ** (k + m)
    )
    return lhs == rhs


@identity("leibniz_d_dV")
def _(p, ctx):
    q = ctx.any_field()
    k, m = p.k, p.m
    lhs = fc.d(fc.d_v(fc.wedge(p, q)))
    rhs = (
        fc.wedge(fc.d(fc.d_v(p)), q)
        + fc.wedge(fc.d(p), fc.d_v(q)) * (-1) ** m
        + fc.wedge(fc.d_v(p), fc.d(q)) * (-1) ** k
        + fc.wedge(p, fc.d(fc.d_v(q))) * (-1) ** (k + m)
    )
    return lhs == rhs


@identity("leibniz_H")
def _(p, ctx):
    q = ctx.any_field()
    k, m = p.k, p.m
    lhs = fc.H(fc.wedge(p, q))
    rhs = (
        fc.wedge(fc.H(p), q)
        + fc.wedge(fc.d_v(p), fc.d(q)) * (-1) ** k
        + fc.wedge(fc.d(p), fc.d_v(q)) * (-1) ** m
        + fc.wedge(p, fc.H(q)) * (-1) ** (k + m)
    )
    return lhs == rhs


# --------------------------------------------------------------------------
# Second-order operators

@identity("H_commutes_transpose")
def _(p, ctx):
    return fc.H(X(p)) == X(fc.H(p)) and fc.H_star(X(p)) == X(fc.H_star(p))


@identity("F_is_transposed_Fstar")
def _(p, ctx):
    return X(fc.F_star(X(p))) == fc.F(p)


@identity("Hstar_star_conjugate")
def _(p, ctx):
    d, k, m = p.d, p.k, p.m
    return fc.H_star(p) == st(_sv(fc.H(st(_sv(p))))) * (-1) ** (d * k + d * m)


@identity("Fstar_star_conjugate")
def _(p, ctx):
    d, k = p.d, p.k
    return fc.F_star(p) == st(fc.H(st(p))) * (-1) ** (d * k + d + 1)


@identity("F_vector_star_conjugate")
def _(p, ctx):
    d, m = p.d, p.m
    return fc.F(p) == _sv(fc.H(_sv(p))) * (-1) ** (d * m + d + 1)


_COMMUTING = {
    "H": (fc.H, [("g_wedge", fc.g_wedge), ("bianchi", fc.bianchi), ("bianchi_v", fc.bianchi_v)]),
    "Hstar": (fc.H_star, [("trace", fc.trace_g), ("bianchi", fc.bianchi), ("bianchi_v", fc.bianchi_v)]),
    "Fstar": (fc.F_star, [("g_wedge", fc.g_wedge), ("trace", fc.trace_g), ("bianchi_v", fc.bianchi_v)]),
    "F": (fc.F, [("g_wedge", fc.g_wedge), ("trace", fc.trace_g), ("bianchi", fc.bianchi)]),
}


def _make_commute(op, tensorial):
    def check(p, ctx):
        return op(tensorial(p)) == tensorial(op(p))

    return check


for _op_name, (_op, _tensorials) in _COMMUTING.items():
    for _t_name, _t in _tensorials:
        identity(f"{_op_name}_commutes_{_t_name}")(_make_commute(_op, _t))


EXACTNESS_PAIRS = [
    ("H", "H"), ("Fstar", "Fstar"), ("Fstar", "H"), ("H", "Fstar"),
    ("Hstar", "Hstar"), ("F", "F"), ("F", "Hstar"), ("Hstar", "F"),
    ("F", "H"), ("Hstar", "Fstar"), ("H", "F"), ("Fstar", "Hstar"),
]

_OPS = {"H": fc.H, "Hstar": fc.H_star, "F": fc.F, "Fstar": fc.F_star}


def _make_exact(outer, inner):
    def check(p, ctx):
        return _OPS[outer](_OPS[inner](p)).is_zero()

    return check


for _outer, _inner in EXACTNESS_PAIRS:
    identity(f"exact_{_outer}_{_inner}")(_make_exact(_outer, _inner))


@identity("bilaplacian_is_squared_laplacian")
def _(p, ctx):
    return fc.bilaplacian(p) == fc.laplacian(fc.laplacian(p))


# --------------------------------------------------------------------------
# Boundary identities

def _face(p, ctx) -> bo.Face:
    return bo.Face(ctx.rng.randint(1, p.d), ctx.rng.randint(0, 1))


@identity("projection_transposes")
def _(p, ctx):
    f = _face(p, ctx)
    pt = X(p)
    return (
        X(bo.P_tt(pt, f)) == bo.P_tt(p, f)
        and X(bo.P_nn(pt, f)) == bo.P_nn(p, f)
        and X(bo.P_nt(pt, f)) == bo.P_tn(p, f)
        and X(bo.P_tn(pt, f)) == bo.P_nt(p, f)
    )


@identity("boundary_operator_transposes")
def _(p, ctx):
    f = _face(p, ctx)
    pt = X(p)
    return (
        X(bo.T_op(pt, f)) == bo.T_op(p, f)
        and X(bo.T_star_op(pt, f)) == bo.T_star_op(p, f)
        and X(bo.F_star_op(pt, f)) == bo.F_op(p, f)
        and X(bo.F_op(pt, f)) == bo.F_star_op(p, f)
    )


@identity("hodge_projection_form")
def _(p, ctx):
    f = _face(p, ctx)
    d, k = p.d, p.k
    s = st(p)

    def h0(q):
        return bo.face_hodge(q, f)

    return (
        bo.P_tt(s, f) == h0(bo.P_nt(p, f)) * (-1) ** (d + 1)
        and bo.P_tn(s, f) == h0(bo.P_nn(p, f)) * (-1) ** (d + 1)
        and bo.P_nt(s, f) == h0(bo.P_tt(p, f)) * (-1) ** (d + k + 1)
        and bo.P_nn(s, f) == h0(bo.P_tn(p, f)) * (-1) ** (d + k + 1)
    )


@identity("hodge_projection_vector")
def _(p, ctx):
    f = _face(p, ctx)
    d, m = p.d, p.m
    s = _sv(p)

    def h0(q):
        return bo.face_hodge(q, f, "vector")

    return (
        bo.P_tt(s, f) == h0(bo.P_tn(p, f)) * (-1) ** (d + 1)
        and bo.P_nt(s, f) == h0(bo.P_nn(p, f)) * (-1) ** (d + 1)
        and bo.P_tn(s, f) == h0(bo.P_tt(p, f)) * (-1) ** (d + m + 1)
        and bo.P_nn(s, f) == h0(bo.P_nt(p, f)) * (-1) ** (d + m + 1)
    )


@identity("boundary_operator_star_duality")
def _(p, ctx):
    f = _face(p, ctx)
    return all(r.is_zero() for r in bo.star_duality_residuals(p, f).values())


@identity("trace_reconstruction")
def _(p, ctx):
    f = _face(p, ctx)
    return bo.face_projections(p, f).reconstruct(p.d) == bo.restrict(p, f)


@identity("T_flat_form")
def _(p, ctx):
    f = _face(p, ctx)
    return bo.T_op(p, f) == bo.T_flat(p, f)


@identity("tangential_commutators")
def _(p, ctx):
    f = _face(p, ctx)
    return all(r.is_zero() for r in bo.tangential_commutators(p, f).values())


@identity("green_H")
def _(p, ctx):
    eta = ctx.field(p.k + 1, p.m + 1)
    weighted = fc.multiply(p, bo.edge_weight(p.domain))
    return bo.greens_residual(weighted, eta, "H") == 0


@identity("green_F")
def _(p, ctx):
    eta = ctx.field(p.k + 1, p.m - 1)
    weighted = fc.multiply(p, bo.edge_weight(p.domain))
    return bo.greens_residual(weighted, eta, "F") == 0


# --------------------------------------------------------------------------

def run_identity_suite(
    seed: int = 0,
    d_max: int = 4,
    degree_cap: int = 3,
    n_fields: int = 20,
    d_min: int = 2,
    names: list[str] | None = None,
) -> IdentityReport:
    """Run every registered identity on seeded random polynomial fields.

    For each dimension d in [d_min, d_max] and every bidegree (k, m),
    ``n_fields`` sparse random fields of degree at most ``degree_cap`` are
    drawn.  Failures become report entries, never exceptions.
    """
    start = time.perf_counter()
    report = IdentityReport(seed, d_max, degree_cap, n_fields)
    selected = [(n, fn) for n, fn in _CHECKS if names is None or n in names]
    for d in range(d_min, d_max + 1):
        domain = FlatDomain(d)
        rng = random.Random(f"{seed}:{d}")
        ctx = _Context(rng, domain, degree_cap)
        for k in range(d + 1):
            for m in range(d + 1):
                for sample in range(n_fields):
                    psi = ctx.field(k, m)
                    for name, fn in selected:
                        try:
                            ok = bool(fn(psi, ctx))
                        except Exception:  # a crash is a failed identity, reported not raised
                            ok = False
                        report.checks.append(IdentityCheck(name, d, k, m, sample, ok))
    report.seconds = time.perf_counter() - start
    return report
