import csv
import io
import json
from pathlib import Path

import pytest

from pipelab.cli import (ANALYZE_COLUMNS, DEVICE_COLUMNS, EXIT_CONFIG, EXIT_OK, EXIT_VALIDATION, EXIT_VERIFY,
                         METRICS_COLUMNS, SWEEP_COLUMNS, main)
from pipelab.scenario import bundled
from pipelab.schedules import schedule_from_dict, validate_schedule

CORRUPTED = Path(__file__).parent / "fixtures" / "corrupted_schedule.json"


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_simulate_writes_outputs(tmp_path, capsys):
    code = main(["simulate", str(bundled("fig4_bottom.json")), "--gantt", "svg", "--out", str(tmp_path)])
    assert code == EXIT_OK
    out = _rows(capsys.readouterr().out)
    assert out[0] == METRICS_COLUMNS
    assert out[1][:5] == ["slimpipe", "4", "1", "4", "8"]
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == ",".join(METRICS_COLUMNS)
    devices = _rows((tmp_path / "devices.csv").read_text())
    assert devices[0] == DEVICE_COLUMNS and len(devices) == 5
    assert json.loads((tmp_path / "timeline.json").read_text())["p"] == 4
    assert (tmp_path / "gantt.svg").read_text().startswith("<svg")


def test_simulate_is_deterministic(tmp_path):
    args = ["simulate", "--scheme", "slimpipe", "--p", "2", "--m", "2", "--n", "4", "--exchange", "on",
            "--beta-attn", "0.01", "--gantt", "json"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("metrics.csv", "devices.csv", "timeline.json", "gantt.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_trivial_scenario_has_no_bubble(tmp_path, capsys):
    assert main(["simulate", str(bundled("trivial.json")), "--out", str(tmp_path)]) == EXIT_OK
    row = dict(zip(*_rows(capsys.readouterr().out)))
    assert row["bubble_fraction"] == "0"


@pytest.mark.parametrize("args", [
    ["simulate", "--scheme", "slimpipe", "--p", "4", "--n", "6"],
    ["simulate", "--scheme", "interleaved", "--p", "4", "--m", "2", "--v", "2"],
    ["simulate", "/nonexistent.json"],
    ["simulate", "--schedule", "/nonexistent.json"],
    ["export-schedule", "--scheme", "1f1b", "--p", "4", "--m", "2"],
])
def test_bad_configuration_exits_2(tmp_path, args, capsys):
    assert main(args + (["--out", str(tmp_path / "o")] if args[0] == "simulate" else [])) == EXIT_CONFIG
    assert capsys.readouterr().err.startswith("error:")


def test_bad_scenario_file_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scheme": "1f1b", "colour": "red"}))
    assert main(["simulate", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_corrupted_schedule_exit_codes(tmp_path, capsys):
    assert main(["simulate", "--schedule", str(CORRUPTED), "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert "reverse-order" in capsys.readouterr().err
    assert main(["verify", "--schedule", str(CORRUPTED)]) == EXIT_VERIFY
    assert "[FAIL] schedule/reverse-order" in capsys.readouterr().out


def test_export_then_simulate_schedule(tmp_path, capsys):
    path = tmp_path / "sch.json"
    assert main(["export-schedule", "--scheme", "slimpipe", "--p", "2", "--m", "2", "--n", "4",
                 "--out", str(path)]) == EXIT_OK
    assert validate_schedule(schedule_from_dict(json.loads(path.read_text()))) == []
    assert main(["verify", "--schedule", str(path)]) == EXIT_OK
    capsys.readouterr()
    assert main(["simulate", "--schedule", str(path), "--out", str(tmp_path / "o")]) == EXIT_OK
    row = dict(zip(*_rows(capsys.readouterr().out)))
    assert row["peak_fraction"] == "0.75"  # 1/p + 2(p-1)/(np) at p=2, n=4


def test_sweep_keeps_one_row_per_point(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    base = json.loads(bundled("trivial.json").read_text())
    grid.write_text(json.dumps({"format": "pipelab.sweep/1", "base": base,
                                "grid": {"p": [1, 2], "n": [1, 2], "scheme": ["1f1b", "slimpipe"]}}))
    assert main(["sweep", str(grid), "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows((tmp_path / "sweep.csv").read_text())
    assert rows[0] == SWEEP_COLUMNS and len(rows) == 9
    errors = {int(r[0]): r[-1] for r in rows[1:]}
    # the last grid key varies fastest: index = 4*p + 2*n + scheme
    assert sorted(k for k, e in errors.items() if e) == [2, 5, 6]
    assert "multiple of p" in errors[5]
    assert capsys.readouterr().out == (tmp_path / "sweep.csv").read_text()


def test_analyze(capsys):
    assert main(["analyze", "--p", "4", "--m", "4"]) == EXIT_OK
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ANALYZE_COLUMNS and len(rows) == 8
    slim = dict(zip(rows[0], next(r for r in rows if r[0] == "slimpipe")))
    assert slim["memory_multiplier"] == "0.625"
    assert main(["analyze", "--scheme", "1f1b", "--p", "2", "--m", "2", "--compare"]) == EXIT_OK
    report = _rows(capsys.readouterr().out)
    assert report[1][-1] == "0"


def test_verify_suites(capsys):
    assert main(["verify", "formulas"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert all(line.startswith("[PASS]") for line in out[:-1])
    assert out[-1].endswith("checks passed")
