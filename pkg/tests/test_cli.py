import json
import subprocess
import sys

import numpy as np
import pytest

from cavesim import cli, io
from cavesim.calib import DistortionGrid
from cavesim.pattern import read_ppm
from cavesim.rig import FaultSet


def _write(path, obj):
    path.write_text(json.dumps(obj, indent=2))
    return str(path)


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_pattern_writes_eight_ppms(tmp_path):
    assert cli.main(["pattern", "--out", str(tmp_path / "a")]) == 0
    ppms = sorted(p.name for p in (tmp_path / "a").glob("*.ppm"))
    assert len(ppms) == 8 and "front_left.ppm" in ppms and "floor_right.ppm" in ppms
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["command"] == "pattern"
    assert set(manifest["files"]) == set(ppms)


def test_pattern_byte_identical(tmp_path):
    cli.main(["pattern", "--out", str(tmp_path / "a")])
    cli.main(["pattern", "--out", str(tmp_path / "a2")])
    a, b = _files(tmp_path / "a"), _files(tmp_path / "a2")
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b


def _vertical_lines(img):
    return np.count_nonzero(np.all(img.pixels[30] == 255, axis=1))


def test_pattern_double_spacing_halves_lines(tmp_path):
    cli.main(["pattern", "--out", str(tmp_path / "a")])
    cli.main(["pattern", "--spacing", "0.3048", "--out", str(tmp_path / "b")])
    n1 = _vertical_lines(read_ppm((tmp_path / "a" / "front_left.ppm").read_bytes()))
    n2 = _vertical_lines(read_ppm((tmp_path / "b" / "front_left.ppm").read_bytes()))
    assert (n1, n2) == (20, 10)


def test_pattern_with_faults_writes_captures(tmp_path):
    faults = _write(tmp_path / "f.json", {"unit": "m", "screens": {"front": {"genlock_break_row": 400}}})
    assert cli.main(["pattern", "--faults", faults, "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "front_left_seen.ppm").exists()


def test_diagnose_clean_exit_zero(tmp_path, capsys):
    assert cli.main(["diagnose", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    io.validate_report(doc)
    assert doc["schema_version"] == io.REPORT_SCHEMA_VERSION and doc["seed"] == 0
    assert doc["summary"]["fail"] == 0
    assert "pass" in capsys.readouterr().out


def test_diagnose_eye_swap_exit_one(tmp_path):
    faults = _write(tmp_path / "f.json", {"unit": "m", "screens": {"right": {"eye_swap": True}}})
    assert cli.main(["diagnose", "--faults", faults, "--out", str(tmp_path / "o"), "--seed", "5"]) == 1
    doc = json.loads((tmp_path / "o" / "report.json").read_text())
    failed = [f["test_name"] for f in doc["findings"] if f["status"] == "fail"]
    assert failed == ["test_stereo_phase"]
    assert doc["seed"] == 5 and doc["faults_digest"]


def test_diagnose_malformed_json_exit_64(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "unit": "m",,\n}')
    assert cli.main(["diagnose", "--faults", str(bad), "--out", str(tmp_path / "o")]) == 64
    assert "line 2" in capsys.readouterr().err


def test_diagnose_bad_field_exit_64(tmp_path, capsys):
    faults = _write(tmp_path / "f.json", {"unit": "m", "screens": {"right": {"ghost_leak": 2}}})
    assert cli.main(["diagnose", "--faults", faults, "--out", str(tmp_path / "o")]) == 64
    assert "ghost_leak" in capsys.readouterr().err


def test_unknown_unit_exit_64(tmp_path):
    cfg = _write(tmp_path / "r.json", {"unit": "furlong", "preset": "cave"})
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 64


def test_usage_error_exit_64(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["diagnose"])
    assert exc.value.code == 64
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate", "--out", str(tmp_path)])
    assert exc.value.code == 64


def test_units_converted_to_metres(tmp_path):
    doc = {"unit": "in", "tracker_offset": [2, 0, 0]}
    f = io.faults_from_dict(doc)
    np.testing.assert_allclose(f.tracker_offset, (0.0508, 0, 0))
    r = io.rig_from_dict({"unit": "ft", "preset": "cave", "side": 10})
    assert r.screen("front").width == pytest.approx(3.048)


def test_simulate_61_lines_deterministic(tmp_path):
    faults = _write(tmp_path / "f.json", {"unit": "m", "jitter_sigma": 0.002})
    args = ["simulate", "--faults", faults, "--duration", "1.0", "--seed", "9"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "frames.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "frames.jsonl").read_bytes()
    lines = a.decode().splitlines()
    assert len(lines) == 61
    assert all(json.loads(line)["seed"] == 9 for line in lines)


def test_simulate_latency_visible_as_wand_lag(tmp_path):
    traj = _write(tmp_path / "t.json", {
        "unit": "m", "kind": "wag", "head": [0, 1.5, 0.5], "center": [0, 1.2, -0.5],
        "amplitude": 0.3, "frequency": 1.0, "duration": 1.0})
    faults = _write(tmp_path / "f.json", {"unit": "m", "latency_s": 0.1})
    assert cli.main(["simulate", "--trajectory", traj, "--faults", faults,
                     "--out", str(tmp_path)]) == 0
    frames = [json.loads(line) for line in (tmp_path / "frames.jsonl").read_text().splitlines()]
    for fr in frames[10:]:
        t = fr["t"]
        assert fr["truth"]["wand"]["position"][0] == pytest.approx(0.3 * np.sin(2 * np.pi * t))
        assert fr["reported"]["wand"]["position"][0] == pytest.approx(
            0.3 * np.sin(2 * np.pi * (t - 0.1)), abs=1e-12)
    # the drawn marker follows the lagged position
    assert frames[15]["screens"]["front"]["left"]["wand"] != frames[21]["screens"]["front"]["left"]["wand"]


def test_calibrate_constant_offset(tmp_path):
    faults = _write(tmp_path / "f.json", {"unit": "m", "tracker_offset": [0.05, 0, 0]})
    assert cli.main(["calibrate", "--faults", faults, "--out", str(tmp_path)]) == 0
    grid = DistortionGrid.from_dict(json.loads((tmp_path / "correction_grid.json").read_text()))
    np.testing.assert_allclose(grid.offsets.reshape(-1, 3) - (0.05, 0, 0), 0, atol=1e-6)
    summary = json.loads((tmp_path / "calibration_summary.json").read_text())
    assert summary["fixed_marker_error_after_m"] < summary["fixed_marker_error_before_m"] / 10
    assert summary["seed"] == 0


def test_calibrate_zero_fault(tmp_path):
    assert cli.main(["calibrate", "--out", str(tmp_path)]) == 0
    grid = DistortionGrid.from_dict(json.loads((tmp_path / "correction_grid.json").read_text()))
    assert np.abs(grid.offsets).max() < 1e-6


def test_calibrate_unobservable_exit_one(tmp_path, capsys):
    stations = _write(tmp_path / "s.json", {
        "unit": "m", "stations": [[0, 1.5, 0]], "targets": {"front": [0, 1.5, -1.2]},
        "viewpoints": 3, "spread": 0})
    assert cli.main(["calibrate", "--stations", stations, "--out", str(tmp_path / "o")]) == 1
    assert "unobservable" in capsys.readouterr().err


def test_report_schema_rejects_bad_report():
    import jsonschema
    with pytest.raises(jsonschema.ValidationError):
        io.validate_report({"schema_version": "1.0", "findings": [{"status": "maybe"}]})


def test_fault_dict_round_trip():
    doc = {"unit": "m", "tracker_offset": [0.1, 0, 0], "latency_s": 0.05,
           "screens": {"front": {"eye_swap": True, "plane_shift": 0.1,
                                 "projector_affine": [[1, 0, 0.002], [0, 1, 0]]}}}
    f = io.faults_from_dict(doc)
    again = io.faults_from_dict(io.faults_to_dict(f))
    assert io.digest_faults(f) == io.digest_faults(again)
    assert io.digest_faults(f) != io.digest_faults(FaultSet())


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cavesim", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "cavesim" in r.stdout
