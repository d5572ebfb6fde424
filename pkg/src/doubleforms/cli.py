"""Batch front end: ``doubleforms <command> [options]``.

Exit codes: 0 success or PASS, 1 mathematical FAIL (report still written),
2 usage error, 3 numeric, resource or I/O error.  Reports are JSON with
sorted keys and 17 significant digits, or CSV for convergence tables.
Progress goes to standard error.  ``DOUBLEFORMS_THREADS`` caps the BLAS
thread count.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from collections.abc import Mapping, Sequence
from typing import Any

SCHEMA = "1"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Report serialisation

def _number(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        return "null"
    if x == int(x) and abs(x) < 1e17:
        return repr(float(x))
    return format(x, ".17g")


def _encode(obj: Any, indent: int) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if hasattr(obj, "tolist") and not isinstance(obj, (str, bytes)):
        obj = obj.tolist()
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(int(obj))
    if isinstance(obj, float):
        return _number(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_encode(obj[k], indent + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _encode(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, complex):
        return _encode([obj.real, obj.imag], indent)
    try:
        return _number(float(obj))
    except (TypeError, ValueError):
        return json.dumps(str(obj))


def dumps(report: Mapping) -> str:
    """Bit-stable JSON text of a report, with the schema field added."""
    return _encode({**report, "schema": SCHEMA}, 0) + "\n"


def report_write(report: Mapping | str, path: str | None, fmt: str = "json") -> None:
    """Write a report (a mapping for JSON, CSV text for CSV) to ``path`` or stdout."""
    text = dumps(report) if fmt == "json" else str(report)
    if path in (None, "-"):
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _progress(enabled: bool, msg: str) -> None:
    if enabled:
        print(msg, file=sys.stderr, flush=True)


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _read_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


# --------------------------------------------------------------------------
# Commands; each returns (report, passed)

def cmd_verify_identities(args) -> tuple[dict, bool]:
    from . import identities

    d_min = args.d if args.d is not None else 2
    d_max = args.d if args.d is not None else args.d_max
    _progress(args.progress, f"identity suite: d in [{d_min}, {d_max}], {args.fields} fields per bidegree")
    rep = identities.run_identity_suite(seed=args.seed, d_max=d_max, degree_cap=args.degree, n_fields=args.fields,
                                        d_min=d_min)
    out = rep.to_json()
    out.pop("seconds", None)
    out["command"] = "verify-identities"
    out["d_min"] = d_min
    return out, rep.passed


def cmd_check_ellipticity(args) -> tuple[dict, bool]:
    from . import fiber_algebra as fa
    from . import symbol_ellipticity as se

    if args.set == "all":
        sets = list(se.FULL_SETS) + list(se.SYMMETRIC_SETS)
    elif args.set in se.FULL_SETS + se.SYMMETRIC_SETS:
        sets = [args.set]
    else:
        raise UsageError(f"unknown boundary set {args.set!r}")
    dims = [args.d] if args.d is not None else [2, 3, 4]
    cases = []
    for d in dims:
        ks = [args.k] if args.k is not None else range(d + 1)
        ms = [args.m] if args.m is not None else range(d + 1)
        for k in ks:
            for m in ms:
                if not fa.in_range(d, k, m):
                    raise UsageError(f"bidegree ({k},{m}) is out of range in dimension {d}")
                for name in sets:
                    if name in se.SYMMETRIC_SETS and k != m:
                        continue
                    _progress(args.progress, f"ellipticity d={d} ({k},{m}) {name}")
                    rep = se.check_regular_ellipticity(d, k, m, name, args.samples, args.seed, args.threshold)
                    audit = se.dimension_audit(d, k, m, name)
                    entry = rep.to_json()
                    entry["dimension_audit"] = {"total": audit.total, "expected": audit.expected,
                                                "matches": audit.matches}
                    entry["pass"] = rep.passed and audit.matches
                    cases.append(entry)
    passed = all(c["pass"] for c in cases)
    return {"command": "check-ellipticity", "seed": args.seed, "samples": args.samples,
            "threshold": args.threshold, "cases": cases, "pass": passed}, passed


def cmd_solve(args) -> tuple[dict | str, bool]:
    from . import elliptic_solver as es

    if args.plate_study:
        study = es.clamped_plate_study(_ints(args.grids), method=args.method)
        ok = min(study.orders) >= 1.8 and study.errors[-1] <= 1e-2
        if args.format == "csv":
            return study.to_csv(), ok
        return {"command": "solve", "study": "clamped-plate", **study.to_json(), "pass": ok}, ok
    if not args.problem:
        raise UsageError("solve needs a problem file or --plate-study")
    data = _read_json(args.problem)
    if not isinstance(data, Mapping):
        raise UsageError("problem file must hold a JSON object")
    problem = es.load_problem(data)
    _progress(args.progress, f"solve {problem.family} ({problem.k},{problem.m}) on {problem.context.domain.grid}")
    result = es.run_problem(problem, method=args.method, progress=args.progress)
    out = result.to_json(include_field=args.include_field)
    out["command"] = "solve"
    out["problem"] = os.path.basename(args.problem)
    return out, True


def _random_fields(args, domain, count: int):
    import random

    from . import field_calculus as fc

    rng = random.Random(args.seed)
    poly = fc.FlatDomain(domain.d, "box", domain.extent)
    return [fc.DoubleFormField(domain, fc.random_field(poly, args.k, args.m, rng, degree=args.degree,
                                                       max_keys=4, n_terms=5).value) for _ in range(count)]


def cmd_decompose(args) -> tuple[dict, bool]:
    from . import elliptic_solver as es
    from . import field_calculus as fc

    grids = _ints(args.grids)
    runs = []
    for n in grids:
        ctx = es.SolverContext(fc.FlatDomain(args.d, grid=n))
        if args.input:
            data = _read_json(args.input)
            fields = [fc.field_from_json(data, ctx.domain)]
        else:
            fields = _random_fields(args, ctx.domain, args.samples)
        for i, psi in enumerate(fields):
            _progress(args.progress, f"decompose grid {n} field {i}")
            r = es.decompose(psi, ctx)
            entry = r.to_json()
            entry.update({"grid": n, "field": i})
            runs.append(entry)
    worst = {}
    for n in grids:
        here = [r for r in runs if r["grid"] == n]
        worst[str(n)] = {"relative_residual": max(r["relative_residual"] for r in here),
                         "relative_offdiagonal": max(r["relative_offdiagonal"] for r in here)}
    passed = all(w["relative_residual"] <= args.tol and w["relative_offdiagonal"] <= args.tol for w in worst.values())
    return {"command": "decompose", "d": args.d, "bidegree": [args.k, args.m], "seed": args.seed,
            "tol": args.tol, "runs": runs, "worst": worst, "pass": passed}, passed


def cmd_kernel(args) -> tuple[dict, bool]:
    from . import elliptic_solver as es

    grids = _ints(args.grids)
    _progress(args.progress, f"kernel {args.family} ({args.k},{args.m}) on grids {grids}")
    study = es.kernel_dimension(args.family, args.d, args.k, args.m, grids)
    out = study.to_json()
    out["command"] = "kernel"
    if args.split:
        ctx = es.SolverContext(es.FlatDomain(args.d, grid=grids[0]))
        out["split"] = es.bh_split(args.family, ctx, args.k, args.m).to_json()
    passed = study.stable and not study.inconclusive
    out["pass"] = passed
    return out, passed


def cmd_korn(args) -> tuple[dict, bool]:
    from . import elliptic_solver as es

    grids = _ints(args.grids)
    reports = []
    for n in grids:
        _progress(args.progress, f"korn {args.family} ({args.k},{args.m}) grid {n}")
        ctx = es.SolverContext(es.FlatDomain(args.d, grid=n))
        reports.append(es.korn_constant(args.family, ctx, args.k, args.m, count=args.samples, seed=args.seed))
    consts = [r.constant for r in reports]
    spread = max(consts) / min(consts) - 1 if min(consts) > 0 else math.inf
    passed = all(math.isfinite(c) for c in consts) and spread <= args.stability
    return {"command": "korn", "family": args.family, "bidegree": [args.k, args.m], "seed": args.seed,
            "grids": grids, "constants": consts, "spread": spread, "stability": args.stability,
            "reports": [r.to_json() for r in reports], "pass": passed}, passed


COMMANDS = {
    "verify-identities": cmd_verify_identities,
    "check-ellipticity": cmd_check_ellipticity,
    "solve": cmd_solve,
    "decompose": cmd_decompose,
    "kernel": cmd_kernel,
    "korn": cmd_korn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doubleforms", description="Double forms on flat domains.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeded: bool, csv: bool = False):
        p.add_argument("--out", default=None, help="report path (default: stdout)")
        p.add_argument("--format", choices=("json", "csv") if csv else ("json",), default="json")
        p.add_argument("--progress", action="store_true", help="progress messages on stderr")
        # deterministic commands accept a seed for uniform scripting but do not need one
        p.add_argument("--seed", type=int, required=seeded, default=None)

    p = sub.add_parser("verify-identities", help="exact identity lattice on random polynomial fields")
    common(p, seeded=True)
    p.add_argument("--d", type=int, default=None, help="single dimension (default: 2..--d-max)")
    p.add_argument("--d-max", type=int, default=4)
    p.add_argument("--fields", type=int, default=20)
    p.add_argument("--degree", type=int, default=3)

    p = sub.add_parser("check-ellipticity", help="sampled Lopatinskij-Shapiro audit")
    common(p, seeded=True)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--set", default="all")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--threshold", type=float, default=1e-8)

    p = sub.add_parser("solve", help="solve a problem file, or run the clamped-plate study")
    common(p, seeded=False, csv=True)
    p.add_argument("problem", nargs="?", default=None)
    p.add_argument("--method", choices=("direct", "cg"), default="direct")
    p.add_argument("--plate-study", action="store_true")
    p.add_argument("--grids", default="16,32,64")
    p.add_argument("--include-field", action="store_true")

    p = sub.add_parser("decompose", help="five-way decomposition of seeded fields or an input field")
    common(p, seeded=True)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--m", type=int, default=0)
    p.add_argument("--grids", default="32")
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--degree", type=int, default=4)
    p.add_argument("--input", default=None, help="field JSON instead of random fields")
    p.add_argument("--tol", type=float, default=5e-2)

    p = sub.add_parser("kernel", help="discrete biharmonic kernel dimension across grids")
    common(p, seeded=False)
    p.add_argument("--family", choices=("TT", "NN", "NT", "TN"), required=True)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--m", type=int, default=0)
    p.add_argument("--grids", default="24,48")
    p.add_argument("--split", action="store_true", help="also split the biharmonic module")

    p = sub.add_parser("korn", help="empirical Korn-type constant across grids")
    common(p, seeded=True)
    p.add_argument("--family", choices=("TT", "NN", "NT", "TN"), required=True)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--m", type=int, default=0)
    p.add_argument("--grids", default="24,48")
    p.add_argument("--samples", type=int, default=6)
    p.add_argument("--stability", type=float, default=0.2)
    return parser


def _limit_threads() -> None:
    threads = os.environ.get("DOUBLEFORMS_THREADS")
    if threads:
        for var in THREAD_VARS:
            os.environ[var] = threads


def run(argv: Sequence[str] | None = None) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    from .elliptic_solver import SolverError
    from .fiber_algebra import DomainError

    try:
        report, passed = COMMANDS[args.command](args)
    except (UsageError, DomainError) as exc:
        print(f"doubleforms: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, MemoryError, ArithmeticError) as exc:
        print(f"doubleforms: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    fmt = "csv" if isinstance(report, str) else "json"
    try:
        report_write(report, args.out, fmt)
    except OSError as exc:
        print(f"doubleforms: cannot write report: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if passed else EXIT_FAIL


def main() -> None:
    sys.exit(run())
