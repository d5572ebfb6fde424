from fractions import Fraction

from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from doubleforms import fiber_algebra as fa

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

rationals = st.fractions(min_value=-5, max_value=5, max_denominator=7)


@st.composite
def double_forms(draw, d=None, k=None, m=None, max_d=4):
    d = draw(st.integers(2, max_d)) if d is None else d
    k = draw(st.integers(0, d)) if k is None else k
    m = draw(st.integers(0, d)) if m is None else m
    basis = fa.enumerate_basis(d, k, m)
    coeffs = draw(st.lists(rationals, min_size=len(basis), max_size=len(basis)))
    return fa.DoubleForm.from_vector(d, k, m, coeffs)


@st.composite
def symmetric_forms(draw, d, l):
    a = draw(double_forms(d=d, k=l, m=l))
    return fa.symmetrize(a)


def vectors(d):
    return st.lists(rationals, min_size=d, max_size=d)


def frac(*args):
    return Fraction(*args)


# acceptance summary: one PASS/FAIL line per criterion at the end of the run

_ACCEPTANCE: dict[str, str] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[f"criterion_{n}_"] = f"ACCEPT {n} {'PASS' if ok else 'FAIL'}: {detail}"


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid and report.failed:
        name = report.nodeid.split("::")[-1]
        key = next((k for k in _ACCEPTANCE if k in name), None)
        if key is None:
            n = name.split("_")[2]
            _ACCEPTANCE[f"criterion_{n}_"] = f"ACCEPT {n} FAIL: raised {report.longrepr.reprcrash.message}"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split("_")[1])):
            terminalreporter.write_line(_ACCEPTANCE[key])


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
