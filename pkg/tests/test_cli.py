import json
import os

import pytest

from doubleforms import cli
from doubleforms import field_calculus as fc
from doubleforms.field_calculus import DoubleFormField, FlatDomain


def run_to(tmp_path, name, *argv):
    out = tmp_path / name
    code = cli.run([*argv, "--out", str(out)])
    return code, out


def test_verify_identities_d3_passes(tmp_path):
    code, out = run_to(tmp_path, "ids.json", "verify-identities", "--d", "3", "--seed", "7")
    data = json.loads(out.read_text())
    assert code == 0 and data["pass"] and data["schema"] == "1"
    assert data["n_checks"] > 0 and not data["failures"]


def test_check_ellipticity_d3_11_all_sets(tmp_path):
    code, out = run_to(tmp_path, "ell.json", "check-ellipticity", "--d", "3", "--k", "1", "--m", "1",
                       "--set", "all", "--samples", "64", "--seed", "1")
    data = json.loads(out.read_text())
    assert code == 0 and data["pass"]
    assert {c["case"]["set"] for c in data["cases"]} == {"TT", "NN", "NT", "TN", "STT", "SNN"}
    assert all(c["dimension_audit"]["matches"] for c in data["cases"])


def test_missing_problem_file_is_usage_error(tmp_path):
    assert cli.run(["solve", str(tmp_path / "missing-file.json"), "--seed", "0"]) == cli.EXIT_USAGE


def test_seed_is_mandatory():
    assert cli.run(["verify-identities", "--d", "2"]) == cli.EXIT_USAGE


def test_unknown_command_and_set():
    assert cli.run(["plot"]) == cli.EXIT_USAGE
    assert cli.run(["check-ellipticity", "--set", "XX", "--seed", "0"]) == cli.EXIT_USAGE


def test_out_of_range_bidegree_is_usage_error():
    assert cli.run(["check-ellipticity", "--d", "2", "--k", "3", "--m", "0", "--seed", "0"]) == cli.EXIT_USAGE


def test_repeated_runs_are_byte_identical(tmp_path):
    argv = ["check-ellipticity", "--d", "2", "--k", "1", "--m", "0", "--set", "TT", "--samples", "8", "--seed", "3"]
    _, a = run_to(tmp_path, "a.json", *argv)
    _, b = run_to(tmp_path, "b.json", *argv)
    assert a.read_bytes() == b.read_bytes()


def test_plate_study_csv_header(tmp_path):
    code, out = run_to(tmp_path, "plate.csv", "solve", "--plate-study", "--grids", "8,16,32",
                       "--format", "csv", "--seed", "0")
    lines = out.read_text().splitlines()
    assert code == 0
    assert lines[0] == "h,err,order" and len(lines) == 4


def _problem_file(tmp_path, **extra):
    dom = FlatDomain(2)
    rhs = DoubleFormField.from_polys(dom, 0, 0, {((), ()): 1})
    data = {"domain": {"d": 2, "kind": "box", "grid": 12}, "k": 0, "m": 0, "family": "TT",
            "rhs": fc.field_to_json(rhs), "tol": 1e-9}
    data.update(extra)
    path = tmp_path / "problem.json"
    path.write_text(json.dumps(data))
    return path


def test_solve_problem_file(tmp_path):
    path = _problem_file(tmp_path)
    code, out = run_to(tmp_path, "sol.json", "solve", str(path), "--seed", "0", "--include-field")
    data = json.loads(out.read_text())
    assert code == 0 and data["residual"] <= 1e-9 and data["kernel_dimension"] == 0
    assert data["field"]["layout"]["grid"] == [12, 12]


def test_solve_rejects_unsupported_boundary_data(tmp_path):
    path = _problem_file(tmp_path, bc={"dirichlet": 0})
    assert cli.run(["solve", str(path), "--seed", "0"]) == cli.EXIT_USAGE


def test_solve_rejects_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert cli.run(["solve", str(path), "--seed", "0"]) == cli.EXIT_USAGE


def test_mathematical_fail_exits_one_and_writes_report(tmp_path):
    code, out = run_to(tmp_path, "dec.json", "decompose", "--grids", "8", "--samples", "1",
                       "--tol", "1e-14", "--seed", "0")
    data = json.loads(out.read_text())
    assert code == cli.EXIT_FAIL and data["pass"] is False


def test_resource_guardrail_exits_three(tmp_path):
    code, out = run_to(tmp_path, "k.json", "kernel", "--family", "TT", "--grids", "200", "--seed", "0")
    assert code == cli.EXIT_NUMERIC and not out.exists()


def test_unwritable_report_exits_three(tmp_path):
    target = tmp_path / "no" / "such" / "dir" / "r.json"
    code = cli.run(["check-ellipticity", "--d", "2", "--k", "0", "--m", "0", "--set", "TT",
                    "--samples", "2", "--seed", "0", "--out", str(target)])
    assert code == cli.EXIT_NUMERIC


def test_kernel_command_with_split(tmp_path):
    code, out = run_to(tmp_path, "ker.json", "kernel", "--family", "NN", "--grids", "12,16", "--split", "--seed", "0")
    data = json.loads(out.read_text())
    assert code == 0 and data["dimension"] == 3
    assert data["split"]["kernel_dimension"] == 3 and data["split"]["complement_dimension"] == 0


def test_korn_command(tmp_path):
    code, out = run_to(tmp_path, "korn.json", "korn", "--family", "TT", "--grids", "12,16",
                       "--samples", "2", "--stability", "0.5", "--seed", "0")
    data = json.loads(out.read_text())
    assert code == 0 and len(data["constants"]) == 2


def test_progress_goes_to_stderr(tmp_path, capsys):
    cli.run(["check-ellipticity", "--d", "2", "--k", "0", "--m", "0", "--set", "NN",
             "--samples", "2", "--seed", "0", "--progress"])
    captured = capsys.readouterr()
    assert "ellipticity" in captured.err
    assert json.loads(captured.out)["pass"]


def test_thread_variable_is_forwarded(monkeypatch):
    monkeypatch.setenv("DOUBLEFORMS_THREADS", "2")
    for var in cli.THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli._limit_threads()
    assert all(os.environ[var] == "2" for var in cli.THREAD_VARS)


# serialisation

def test_dumps_sorts_keys_and_uses_17_digits():
    text = cli.dumps({"b": 0.1, "a": [1, 2.5], "c": float("nan")})
    data = json.loads(text)
    assert list(data) == ["a", "b", "c", "schema"]
    assert "0.10000000000000001" in text
    assert data["c"] is None and data["schema"] == "1"


def test_report_write_to_stdout(capsys):
    cli.report_write({"x": 1}, None)
    assert json.loads(capsys.readouterr().out) == {"x": 1, "schema": "1"}


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        cli.build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    assert cli.run(["--help"]) == cli.EXIT_OK
