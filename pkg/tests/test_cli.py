import json
import subprocess
import sys

import numpy as np
import pytest

from lcks.cli import run
from lcks.problems import ProblemFile, punctured_plane


@pytest.fixture
def problem(tmp_path):
    path = tmp_path / "pp.json"
    assert run(["export", "punctured-plane", "--out", str(path)]) == 0
    return path


def test_export_round_trip(problem):
    spec = ProblemFile.load(problem)
    assert spec.to_dict() == punctured_plane(1).to_dict()
    again = problem.parent / "again.json"
    spec.dump(again)
    assert again.read_bytes() == problem.read_bytes()


def test_demo_passes(capsys):
    assert run(["demo", "punctured-plane", "--format", "json"]) == 0
    checks = json.loads(capsys.readouterr().out)["checks"]
    assert checks and all(c["passed"] for c in checks)


def test_demo_table(capsys):
    assert run(["demo", "punctured-plane", "--k", "2"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out


def test_hdw_known_solution(problem, capsys):
    assert run(["hdw", "--problem", str(problem), "--point", "1,0,1,0", "--gauge", "darboux"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert np.allclose(rep["solutions"][0]["X"], [[1.0, 0.0, 0.0, -1.0]], atol=1e-12)


def test_check_structure(problem, capsys):
    assert run(["check-structure", "--problem", str(problem), "--points", "20"]) == 0


def test_non_closed_lee_form_exit_code(tmp_path, capsys):
    spec = punctured_plane(1).to_dict()
    spec["vartheta"] = ["y", "0"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(spec))
    assert run(["check-structure", "--problem", str(path)]) == 2
    assert "NotClosed" in capsys.readouterr().err


def test_parse_error_diagnostic(tmp_path, capsys):
    spec = punctured_plane(1).to_dict()
    spec["hamiltonian"] = "p_1_x^2 + * y"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(spec))
    assert run(["hdw", "--problem", str(path)]) == 2
    err = capsys.readouterr().err
    assert str(path) in err and "hamiltonian" in err and "^" in err


def test_bad_arguments_exit_2(problem):
    assert run(["hdw", "--problem", str(problem), "--point", "1,0"]) == 2
    assert run(["hdw", "--problem", str(problem), "--gauge", "weird"]) == 2
    assert run(["hdw"]) == 2
    assert run(["nope"]) == 2


def test_integrate_csv(problem, tmp_path):
    out = tmp_path / "grid.csv"
    code = run(["integrate", "--problem", str(problem), "--grid", "10@1e-2", "--format", "csv", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t1,x,y,p_1_x,p_1_y"
    assert len(lines) == 12
    assert [float(v) for v in lines[1].split(",")] == [0.0, 1.0, 0.0, 1.0, 0.0]


def test_byte_identical_reruns(problem, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}.json"
        assert run(["hdw", "--problem", str(problem), "--points", "10", "--seed", "7", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_hj_verify_and_atlas_check(problem, capsys):
    assert run(["hj-verify", "--problem", str(problem), "--points", "30"]) == 0
    assert json.loads(capsys.readouterr().out)["hj"]["verdict"] == "PASS"
    assert run(["atlas-check", "--problem", str(problem), "--points", "30"]) == 0


def test_module_entry_point(problem):
    res = subprocess.run([sys.executable, "-m", "lcks", "hdw", "--problem", str(problem), "--point", "1,0,1,0"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["k"] == 1
