import json
import os
import subprocess
import sys
from functools import lru_cache

import pytest

from switchmoment.cli import (OUT_ENV, OrderRow, RunReport, export_results, format_table,
                              main, report_csv, report_json, run_hierarchy)
from switchmoment.problem import builtin_example, serialize_problem
from switchmoment.relax import RelaxationOrderError


@lru_cache(maxsize=None)
def ex1_report() -> RunReport:
    return run_hierarchy("ex1", 1, 3)


def test_table_layout():
    text = format_table(ex1_report())
    lines = text.splitlines()
    assert lines[0].startswith("# switchmoment.report/1 problem=ex1")
    assert lines[1] == "d | p*_d | N_d | y_1,0 | y_2,0 | status"
    row2 = lines[3].split(" | ")
    assert row2[0] == "2" and row2[1] == "4.1001e-02" and row2[2] == "45"
    assert row2[-1] == "Optimal"
    assert any(line.startswith("# certification:") for line in lines)


def test_bound_format_four_decimals():
    report = RunReport("x", "h", [OrderRow(5, 1 / 24, 198, [0.74979, 0.25021], "Optimal",
                                           10, 0.1, 1e-9)])
    row = format_table(report).splitlines()[2]
    assert row == "5 | 4.1667e-02 | 198 | 0.74979 | 0.25021 | Optimal"


def test_empty_report_is_header_only():
    text = format_table(RunReport("none", "0"))
    assert text.splitlines()[1] == "d | p*_d | N_d | status"
    assert len(text.splitlines()) == 2
    assert report_csv(RunReport("none", "0")).strip().splitlines()[-1] == "d,bound,num_vars,status"


def test_json_round_trip():
    report = ex1_report()
    back = RunReport.from_dict(json.loads(report_json(report)))
    assert back == report
    assert back.rows[0].d == 1


def test_from_dict_rejects_schema():
    with pytest.raises(ValueError):
        RunReport.from_dict({"schema": "other/1", "problem": "x", "problem_hash": "h"})


def test_csv_rows():
    lines = [ln for ln in report_csv(ex1_report()).splitlines() if not ln.startswith("#")]
    assert lines[0] == "d,bound,num_vars,mass_1,mass_2,status"
    assert len(lines) == 4


def test_export_formats(tmp_path):
    for fmt, name in [("table", "report.txt"), ("json", "report.json"), ("csv", "report.csv")]:
        assert export_results(ex1_report(), fmt, tmp_path).name == name
    with pytest.raises(ValueError):
        export_results(ex1_report(), "xml", tmp_path)


def test_order_range_checked():
    with pytest.raises(RelaxationOrderError):
        run_hierarchy("ex1", 3, 2)
    with pytest.raises(RelaxationOrderError):
        run_hierarchy("ex1", 0, 1)


def test_deterministic_apart_from_timing():
    a, b = run_hierarchy("ex1", 1, 2), run_hierarchy("ex1", 1, 2)
    da, db = a.to_dict(), b.to_dict()
    for doc in (da, db):
        for row in doc["rows"]:
            row.pop("wall_time")
    assert da == db


def test_problem_file_and_tmax(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(serialize_problem(builtin_example("ex1")))
    report = run_hierarchy(str(path), 1, 2)
    assert report.problem_hash == builtin_example("ex1").digest()
    short = run_hierarchy("ex1", 1, 1, tmax=0.5)
    assert short.settings["horizon"] == 0.5


def test_main_exit_codes(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env-out"))
    assert main(["run", "ex1", "--dmax", "0"]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["run", "nosuch.json"]) in (2, 3)
    assert main(["run", "ex1", "--dmax", "2"]) == 0
    out = capsys.readouterr().out
    assert "4.1001e-02" in out
    produced = {p.name for p in (tmp_path / "env-out").iterdir()}
    assert {"report.txt", "report.json", "moments_d1.csv", "moments_d2.csv",
            "schedule.csv", "trajectory.csv", "trajectory_pwm.csv"} <= produced


def test_main_out_flag_and_json(tmp_path):
    assert main(["run", "ex1", "--dmax", "2", "--out", str(tmp_path), "--format", "json"]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert [r["num_vars"] for r in doc["rows"]] == [18, 45]


def test_module_entry_point(tmp_path):
    env = {**os.environ, OUT_ENV: str(tmp_path)}
    proc = subprocess.run([sys.executable, "-m", "switchmoment", "run", "ex1", "--dmax", "2"],
                          capture_output=True, text=True, env=env, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert "4.1001e-02" in proc.stdout
    assert (tmp_path / "report.txt").exists()
