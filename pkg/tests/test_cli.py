from __future__ import annotations

import json
from pathlib import Path

import pytest

from spadmon.cli import EXIT_ALARM, EXIT_CLEAN, EXIT_ERROR, main

CONFIGS = Path(__file__).resolve().parent.parent / "demos" / "configs"


def write_config(tmp_path, name="cfg.json", **changes):
    doc = json.loads((CONFIGS / "nominal.json").read_text())
    doc.update(changes)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_simulate_writes_requested_rows(tmp_path):
    cfg = CONFIGS / "nominal.json"
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_CLEAN
    lines = (tmp_path / "a" / "events.csv").read_text().splitlines()
    assert lines[0] == "gate_index,sub_gate_sample,cause"
    assert len(lines) == 200_000 + 1


def test_simulate_is_byte_identical_per_seed(tmp_path):
    cfg = str(write_config(tmp_path, n_detections=5000))
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "4"])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "4"])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "5"])
    a = (tmp_path / "a" / "events.csv").read_bytes()
    assert a == (tmp_path / "b" / "events.csv").read_bytes()
    assert a != (tmp_path / "c" / "events.csv").read_bytes()


def test_zero_detections_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, n_detections=0)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_ERROR
    assert "n_detections" in capsys.readouterr().err


def test_config_errors_name_location(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seed": 1,\n')
    assert main(["simulate", "--config", str(bad)]) == EXIT_ERROR
    assert "line 3" in capsys.readouterr().err
    cfg = write_config(tmp_path, detector={"eta": 2.0})
    assert main(["simulate", "--config", str(cfg)]) == EXIT_ERROR
    assert "eta" in capsys.readouterr().err
    cfg = write_config(tmp_path, detector={"deadtime_s": 3e-6})
    assert main(["simulate", "--config", str(cfg)]) == EXIT_ERROR
    assert "deadtime_s" in capsys.readouterr().err


def test_analyze_reports_decreasing_afterpulsing(tmp_path):
    values = []
    for f in ("1.0", "0.5", "0.1", "0.01"):
        out = tmp_path / f
        code = main(["analyze", "--config", str(CONFIGS / f"after_gate_f{f}.json"), "--out", str(out),
                     "--fixed-clock"])
        assert code == EXIT_ALARM
        report = json.loads((out / "report.json").read_text())
        values.append(report["tail_line_p_after"])
        for name in ("histogram.csv", "pmf_gates.tsv", "pmf_samples.tsv"):
            assert (out / name).exists()
    assert values == sorted(values, reverse=True) and len(set(values)) == 4


def test_analyze_time_shift_peak_list(tmp_path):
    out = tmp_path / "ts"
    assert main(["analyze", "--config", str(CONFIGS / "time_shift.json"), "--out", str(out)]) == EXIT_ALARM
    report = json.loads((out / "report.json").read_text())
    assert report["timing"]["peaks_per_window"] == [3] * 10
    assert report["timing"]["windows"][0]["offsets"] == [-6, 0, 6]


def test_monitor_exit_codes(tmp_path):
    assert main(["monitor", "--config", str(CONFIGS / "nominal.json"), "--out", str(tmp_path / "n")]) == EXIT_CLEAN
    verdict = json.loads((tmp_path / "n" / "verdict.json").read_text())
    assert verdict["alarm"] is False
    code = main(["monitor", "--config", str(CONFIGS / "after_gate_f0.01.json"), "--out", str(tmp_path / "a")])
    assert code == EXIT_ALARM


def test_analyze_from_event_and_histogram_files(tmp_path):
    cfg = str(write_config(tmp_path, n_detections=30_000))
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")])
    assert main(["analyze", "--config", cfg, "--input", str(tmp_path / "sim" / "events.csv"),
                 "--out", str(tmp_path / "ev"), "--fixed-clock"]) == EXIT_CLEAN
    assert main(["analyze", "--config", cfg, "--input", str(tmp_path / "ev" / "histogram.csv"),
                 "--out", str(tmp_path / "hist"), "--fixed-clock"]) == EXIT_CLEAN
    from_events = json.loads((tmp_path / "ev" / "report.json").read_text())
    from_hist = json.loads((tmp_path / "hist" / "report.json").read_text())
    assert from_events["estimate"] == from_hist["estimate"]


def test_malformed_event_rows(tmp_path, capsys):
    cfg = str(write_config(tmp_path))
    bad = tmp_path / "events.csv"
    bad.write_text("gate_index,sub_gate_sample,cause\n1,0,photon\n5,x,photon\n")
    assert main(["analyze", "--config", cfg, "--input", str(bad)]) == EXIT_ERROR
    assert "row 3" in capsys.readouterr().err
    bad.write_text("gate_index,sub_gate_sample,cause\n9,0,photon\n5,0,photon\n")
    assert main(["analyze", "--config", cfg, "--input", str(bad)]) == EXIT_ERROR
    assert "increasing" in capsys.readouterr().err


def test_empty_suite(tmp_path, capsys):
    suite = tmp_path / "suite.json"
    suite.write_text('{"scenarios": []}')
    assert main(["suite", "--config", str(suite), "--out", str(tmp_path / "o"), "--fixed-clock"]) == EXIT_CLEAN
    report = json.loads((tmp_path / "o" / "suite_report.json").read_text())
    assert report["rows"] == [] and report["passed"] is True


def test_misbanded_suite_fails_by_name(tmp_path, capsys):
    cfg = write_config(tmp_path, n_detections=30_000)
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"scenarios": [
        {"name": "fine", "config_path": cfg.name, "expect": {"alarm": False}},
        {"name": "wrong_band", "config_path": cfg.name, "expect": {"tail_line_p_after": [0.2, 0.3]}},
    ]}))
    code = main(["suite", "--config", str(suite), "--out", str(tmp_path / "o")])
    assert code != EXIT_CLEAN
    captured = capsys.readouterr()
    assert "wrong_band" in captured.err
    assert "'fine'" not in captured.err


def test_suite_scenario_errors_carry_name(tmp_path, capsys):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"scenarios": [
        {"name": "broken", "detector": {"eta": 3.0}, "n_detections": 10},
    ]}))
    assert main(["suite", "--config", str(suite)]) == EXIT_ERROR
    assert "broken" in capsys.readouterr().err


def test_fixed_clock_reports_are_byte_identical(tmp_path):
    cfg = str(CONFIGS / "time_shift.json")
    for d in ("a", "b"):
        main(["analyze", "--config", cfg, "--out", str(tmp_path / d), "--fixed-clock"])
    for name in ("report.json", "histogram.csv", "pmf_gates.tsv", "pmf_samples.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
