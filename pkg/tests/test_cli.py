import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from sepcross.cli import emit_csv, main
from sepcross.config import DEFAULTS, load_config
from sepcross.errors import ConfigError


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_theta_json(tmp_path):
    cfg = _write(tmp_path / "c.json", {"preset": "dw-slow", "z": 1.0})
    out = tmp_path / "out"
    assert main(["theta", "--config", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "theta.json").read_text())
    assert set(rep) == {"z", "theta", "P", "quad_error"}
    assert np.allclose(rep["theta"], [2, 2, 4], atol=max(rep["quad_error"], 1e-9))
    assert rep["P"] == pytest.approx([0.5, 0.5], abs=1e-12)


def test_malformed_config_exits_2(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = _write(tmp_path / "c.json", {"N": -5})
    assert main(["ensemble", "--config", cfg, "--out", str(out)]) == 2
    assert not out.exists()
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert diag["status"] == "error" and diag["kind"] == "ConfigError"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["theta", "--config", str(bad), "--out", str(out)]) == 2
    assert main(["theta", "--config", _write(tmp_path / "u.json", {"colour": 1}),
                 "--out", str(out)]) == 2
    assert not out.exists()


def test_model_error_exits_1(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {"preset": "dw-slow", "params": {"gamma": 0.0, "f3": 0.0},
                                       "z": 1.0})
    out = tmp_path / "out"
    assert main(["theta", "--config", cfg, "--out", str(out)]) == 1
    assert json.loads(capsys.readouterr().err.strip())["kind"] == "ConditionCViolation"
    assert not out.exists()


def test_ensemble_output_is_byte_identical(tmp_path):
    cfg = _write(tmp_path / "c.json", {"preset": "dw-slow", "params": {"gamma": 0.2},
                                       "N": 4, "eps": 2e-3, "seed": 5})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["ensemble", "--config", cfg, "--out", str(a)]) == 0
    assert main(["ensemble", "--config", cfg, "--out", str(b), "--threads", "2"]) == 0
    for name in ("report.json", "trajectories.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header = (a / "trajectories.csv").read_text().splitlines()[0]
    assert header == "id,destination,t_minus,t_plus,h_prime,predicted,pre_err,post_err"
    rep = json.loads((a / "report.json").read_text())
    res = rep["results"][0]
    assert res["n1"] + res["n2"] + res["incomplete"] == 4


def test_simulate_trajectory_csv(tmp_path):
    cfg = _write(tmp_path / "c.json", {"preset": "dw-slow",
                                       "initial": {"I": 0.7, "phi": 1.0, "z": 1.0},
                                       "eps": 5e-3, "t_span": 30.0})
    out = tmp_path / "out"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    text = (out / "trajectory.csv").read_text()
    assert text.endswith("\n")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["t", "p", "q", "z0", "h", "nu"]
    t = [float(r[0]) for r in rows[1:]]
    assert t[0] == 0.0 and np.all(np.diff(t) > 0)
    cap = json.loads((out / "capture.json").read_text())
    assert cap["complete"] is False


def test_csv_formatting_roundtrip():
    assert emit_csv(["a", "b"], []) == "a,b\n"
    rng = np.random.default_rng(1)
    vals = rng.standard_normal((20, 3)) * 10.0 ** rng.integers(-12, 12, (20, 3))
    text = emit_csv(["x", "y", "w"], vals.tolist())
    back = np.array([[float(v) for v in r] for r in list(csv.reader(io.StringIO(text)))[1:]])
    assert np.array_equal(back, vals)
    row = emit_csv(["i", "ok", "none", "nan"], [[3, True, None, math.pi]]).splitlines()[1]
    assert row == "3,1,,3.1415926535897931"


def test_config_precedence(tmp_path):
    path = _write(tmp_path / "c.json", {"eps": 2e-3, "N": 50})
    env = {"SEPCROSS_EPS": "5e-4", "SEPCROSS_DELTA": "0.04"}
    cfg = load_config("ensemble", path, {"N": 7}, environ=env)
    assert cfg["eps"] == 5e-4 and cfg["delta"] == 0.04 and cfg["N"] == 7
    assert cfg["kappa_plus"] == DEFAULTS["common"]["kappa_plus"]
    with pytest.raises(ConfigError):
        load_config("ensemble", None, None, environ={"SEPCROSS_RTOL": "-1"})
    with pytest.raises(ConfigError):
        load_config("theta", _write(tmp_path / "s.json", {"subcommand": "sweep"}), None, {})


def test_env_override_through_cli(tmp_path, monkeypatch):
    monkeypatch.setenv("SEPCROSS_Z", "[0.5, 2.0]")
    out = tmp_path / "out"
    assert main(["theta", "--out", str(out)]) == 0
    rep = json.loads((out / "theta.json").read_text())
    assert [r["z"] for r in rep] == [0.5, 2.0]
    assert rep[1]["theta"][0] == pytest.approx(2 * math.sqrt(2), abs=1e-6)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "sepcross", "--version"], capture_output=True,
                       text=True, check=True)
    assert r.stdout.strip().startswith("sepcross ")
    r = subprocess.run([sys.executable, "-m", "sepcross", "geometry", "--out",
                        str(tmp_path / "g")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    geo = json.loads((tmp_path / "g" / "geometry.json").read_text())
    assert geo["areas"][0] == pytest.approx(4 / 3, abs=1e-6)
    header = (tmp_path / "g" / "geometry.csv").read_text().splitlines()[0]
    assert header == "z,nu,h,T,I,S_nu"
