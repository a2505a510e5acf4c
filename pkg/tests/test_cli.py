import io
import json
import math
import subprocess
import sys

import pytest

from ldpms.cli import RunConfig, config_hash, main, parse_config
from ldpms.errors import ConfigError


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(tmp_path, command, text, *extra):
    out = tmp_path / f"out_{command}"
    return main([command, "--config", write(tmp_path, text), "--out", str(out), *extra]), out


def test_check_passes_for_identity_diffusion(tmp_path, capsys):
    code, out = run(tmp_path, "check", '[model]\nsuite = "gaussian"\n')
    assert code == 0
    report = json.loads((out / "check.json").read_text())
    assert report["pass"] and report["ellipticity"]["kappa"] == 1.0
    assert "kappa = 1" in capsys.readouterr().out


@pytest.mark.parametrize("text, name", [
    ('[model]\nsuite = "degenerate"\n', "ellipticity"),
    ('[model]\nsuite = "seam"\n', "H2-lipschitz-growth"),
    ('[regime]\nlaw = {coef = 1.0, exponent = 2.0}\n', "H1-scale-separation"),
])
def test_check_names_failed_assumption(tmp_path, capsys, text, name):
    code, out = run(tmp_path, "check", text)
    assert code == 3
    assert f"FAIL {name}" in capsys.readouterr().err
    assert json.loads((out / "manifest.json").read_text())["pass"] is False


def test_unknown_key_is_config_error(tmp_path, capsys):
    code, _ = run(tmp_path, "check", '[scheme]\nT = 1.0\ntypo_key = 3\n')
    assert code == 2
    assert "scheme.typo_key" in capsys.readouterr().err


def test_toml_syntax_error_reports_line(tmp_path, capsys):
    code, _ = run(tmp_path, "check", '[model]\nsuite = "gaussian"\ndim = = 2\n')
    assert code == 2
    assert "line 3" in capsys.readouterr().err


def test_type_error_reports_field(tmp_path, capsys):
    code, _ = run(tmp_path, "check", '[task.simulate]\nn_paths = "many"\n')
    assert code == 2
    assert "task.simulate.n_paths" in capsys.readouterr().err


def test_simulate_single_zero_dynamics_path(tmp_path):
    # sigma = 0 would fail the ellipticity gate, so the noise is switched off through epsilon instead
    zero = """
[model]
dim = 1
sigma = {kind = "constant", value = [[1.0]]}
[scheme]
T = 0.5
dt = 0.1
x0 = [0.25]
[regime]
epsilons = [1e-300]
law = {coef = 1.0, exponent = 0.0}
"""
    code, out = run(tmp_path, "simulate", zero)
    assert code == 0
    files = sorted(p.name for p in out.glob("path_*.csv"))
    assert files == ["path_00000.csv"]
    rows = (out / files[0]).read_text().splitlines()[1:]
    assert {r.split(",")[1] for r in rows} == {"0.25"}


SIM = """
[model]
suite = "homogenization"
[scheme]
T = 0.5
dt = 0.01
seed = 3
[task.simulate]
n_paths = 100
"""


def test_simulate_batch_and_manifest_rerun(tmp_path, monkeypatch):
    code, out = run(tmp_path, "simulate", SIM, "--threads", "1")
    assert code == 0
    assert len(list(out.glob("path_*.csv"))) == 100
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_paths"] == 100
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["version"]
    assert manifest["config"]["task"]["simulate"]["n_paths"] == 100
    assert manifest["config"]["scheme"]["jump_budget"] == 16.0      # defaults are echoed
    assert manifest["config_hash"] == config_hash(parse_config(manifest["config"]))
    monkeypatch.setenv("LDPMS_THREADS", "8")
    rerun = tmp_path / "rerun"
    assert main(["simulate", "--config", str(out / "manifest.json"), "--out", str(rerun)]) == 0
    assert json.loads((rerun / "manifest.json").read_text())["threads"] == 8
    for p in out.glob("path_*.csv"):
        assert (rerun / p.name).read_bytes() == p.read_bytes()


def test_seed_override_changes_paths(tmp_path):
    code, a = run(tmp_path, "simulate", SIM.replace("n_paths = 100", "n_paths = 1"))
    b = tmp_path / "b"
    assert main(["simulate", "--config", str(a / "manifest.json"), "--out", str(b), "--seed", "4"]) == 0
    assert (a / "path_00000.csv").read_bytes() != (b / "path_00000.csv").read_bytes()
    assert json.loads((b / "manifest.json").read_text())["seed"] == 4


def test_rate_table_gaussian(tmp_path):
    text = '[model]\nsuite = "gaussian"\n[task.rate]\nvelocities = [[0, 0], [0.5, 0], [0, -0.5], [0.3, 0.4], [1, 1]]\n'
    code, out = run(tmp_path, "rate", text)
    assert code == 0
    rows = json.loads((out / "rate.json").read_text())["rows"]
    for row in rows:
        v = row["velocity"]
        assert row["J"] == pytest.approx(0.5 * (v[0] ** 2 + v[1] ** 2), abs=1e-3)
    assert (out / "rate.csv").read_text().splitlines()[0].endswith(",J")


def test_rate_convergence_exit_code(tmp_path):
    text = '[model]\nsuite = "homogenization"\n[task.rate]\nvelocities = [[1.0, 0.5]]\nmax_iter = 1\n'
    code, _ = run(tmp_path, "rate", text)
    assert code == 4


def test_bound_gaussian_1d(tmp_path):
    code, out = run(tmp_path, "bound", '[model]\nsuite = "gaussian"\ndim = 1\n')
    assert code == 0
    data = json.loads((out / "bound.json").read_text())
    assert data["bounds"][0]["bound"] == pytest.approx(math.sqrt(32 * math.pi), rel=1e-2)
    assert data["margin"]["pass"] is True


def test_ldp_report_with_stdin_epsilons(tmp_path, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO("0.2, 0.1\n"))
    text = '[model]\nsuite = "gaussian"\n[task.ldp]\nn_paths = 2000\n'
    code, out = run(tmp_path, "ldp", text, "--epsilons", "-")
    assert code == 0
    data = json.loads((out / "ldp.json").read_text())
    assert data["epsilons"] == [0.2, 0.1]
    assert data["target"] == pytest.approx(-0.5, rel=1e-3)
    assert set(data) >= {"gap", "gap_tol", "pass", "event", "regime_law"}
    assert len((out / "ldp.csv").read_text().splitlines()) == 3


def test_io_error_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["check", "--out", str(blocker / "sub")]) == 5
    assert main(["check", "--config", str(tmp_path / "missing.toml")]) == 5


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("LDPMS_THREADS", "lots")
    assert main(["check", "--out", str(tmp_path / "o")]) == 2


def test_explicit_model_schema():
    cfg = parse_config({"model": {"dim": 1, "sigma": {"kind": "constant", "value": [[2.0]]},
                                  "atoms": [{"mark": [0.5], "mass": 1.0}], "jump": {"kind": "linear"}}})
    assert cfg.model.suite is None
    with pytest.raises(ConfigError):
        parse_config({"model": {"suite": "gaussian", "sigma": {"kind": "constant", "value": [[1.0]]}}})
    with pytest.raises(ConfigError):
        parse_config({"model": {"suite": "nonexistent"}})
    assert isinstance(parse_config({}), RunConfig)


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "ldpms.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("check", "simulate", "rate", "bound", "ldp"):
        assert cmd in res.stdout
