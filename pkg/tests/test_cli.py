import csv
import io
import json

import pytest

from fhecnn import cli, costmodel


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_trace_report(capsys):
    code, out, _ = run(["run", "--preset", "resnet20", "--plan", "optimal"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["schema"] == cli.SCHEMA
    assert rep["boots"] == 10 and rep["status"] == "PASS"
    assert rep["table"]["total"] == sum(rep["rotations"][t] for t in costmodel.TAGS)


def test_run_full_mode(capsys):
    code, out, _ = run(["run", "--plan", "optimal", "--mode", "full", "--stages", "1"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["oracle_max_error"] < 1e-9 and len(rep["logits_checksum"]) == 16


def test_check_reference_flags_mismatch(capsys):
    code, out, _ = run(["run", "--plan", "baseline", "--set", "run.check_reference=true"], capsys)
    assert code == 0 and json.loads(out)["reference_diff"] == {}
    code, out, _ = run(["run", "--plan", "optimal", "--set", "run.check_reference=true"], capsys)
    assert code == 1 and "IR" in json.loads(out)["reference_diff"]


@pytest.mark.parametrize("argv", [
    ["run", "--plan", "(1,2)/(2,2)/(4,8)"],
    ["run", "--plan", "garbage"],
    ["run", "--params", "set_xyz"],
    ["run", "--set", "nodot=1"],
    ["run", "--set", "run.seed=abc"],
    ["run", "--config", "/nonexistent.ini"],
    ["footprint", "--prcr", "3"],
    ["tables", "--tables", "conv,bogus"],
])
def test_config_errors_exit_2(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and "config error" in err


def test_full_mode_memory_guard(capsys):
    code, _, err = run(["run", "--preset", "resnet18", "--mode", "full", "--set", "backend.max_memory_gb=0.01"], capsys)
    assert code == 2 and "full mode needs" in err


def test_config_file(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[network]\npreset = resnet20\nplan = minrot\n")
    code, out, _ = run(["run", "--config", str(ini)], capsys)
    assert code == 0 and json.loads(out)["boots"] == 15
    code, out, _ = run(["run", "--config", str(ini), "--plan", "optimal"], capsys)
    assert json.loads(out)["boots"] == 10


def test_tables_empty_selection(capsys):
    code, out, _ = run(["tables", "--tables", ""], capsys)
    assert code == 0 and out.strip() == "table,row,column,expected,measured,status"


def test_tables_conv_pass(capsys):
    code, out, _ = run(["tables", "--tables", "conv"], capsys)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and rows and all(r["status"] == "PASS" for r in rows)


def test_tables_catch_wrong_formula(capsys, monkeypatch):
    real = costmodel.conv_cost

    def off_by_one(*a, **k):
        c = real(*a, **k)
        c["RaS"] += 1
        return c
    monkeypatch.setattr(costmodel, "conv_cost", off_by_one)
    code, out, _ = run(["tables", "--tables", "conv", "--format", "text"], capsys)
    assert code == 1 and "FAIL" in out


def test_search_csv(tmp_path, capsys):
    dest = tmp_path / "s.csv"
    code, _, _ = run(["search", "--preset", "resnet20", "--top", "3", "--out", str(dest)], capsys)
    rows = list(csv.DictReader(dest.open()))
    assert code == 0 and len(rows) == 3 and rows[0]["plan"] == "(1,2)/(2,4)/(4,8)"


def test_footprint(capsys):
    code, out, _ = run(["footprint", "--preset", "resnet18", "--prcr", "8"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["prcr_segments"] == 8 and rep["n_evk"] == 66
    assert rep["gb"]["weights"] == pytest.approx(45.47, abs=0.01)


def test_sim_error_exit_1(capsys, monkeypatch):
    from fhecnn.errors import LevelExhausted

    def boom(*a, **k):
        raise LevelExhausted("forced")
    monkeypatch.setattr(cli, "run_inference", boom)
    code, _, err = run(["run"], capsys)
    assert code == 1 and "LevelExhausted" in err
