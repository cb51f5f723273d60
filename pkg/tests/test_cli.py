import json
import subprocess
import sys

import numpy as np
import pytest

from openpimd.cli import build_parser, main
from openpimd.runner import RunConfig


def write_ini(path, **kw):
    base = dict(mode="run-1d", beta=2000.0, nbeads=8, dt=50.0, mu=1e-3, md_steps=10, var_steps=6,
                walkers=2, checkpoint_every=2)
    base.update(kw)
    RunConfig(**base).write_ini(path)
    return path


def test_parser_lists_all_commands():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"run-1d", "run-many", "run-rdm", "oracle", "analyze", "extrapolate"}


def test_run_and_restart(tmp_path):
    ini = write_ini(tmp_path / "r.ini")
    out = tmp_path / "out"
    assert main(["run-1d", "--config", str(ini), "--out", str(out), "--seed", "5"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 5 and manifest["config"]["mode"] == "run-1d"
    # a finished checkpoint restarts as a no-op
    assert main(["run-1d", "--config", str(ini), "--out", str(out), "--seed", "5",
                 "--restart", str(out / "checkpoint.npz")]) == 0


def test_bad_config_returns_error_code(tmp_path, caplog):
    (tmp_path / "bad.ini").write_text("[run]\nnbeads = zero\n")
    assert main(["run-1d", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "o")]) == 2
    assert main(["analyze", str(tmp_path / "missing")]) == 2


def test_oracle_then_analyze_compare_refused(tmp_path, capsys):
    out = tmp_path / "oracle"
    assert main(["oracle", "--out", str(out)]) == 0
    assert (out / "np.csv").exists() and (out / "spectrum.csv").exists()
    assert main(["analyze", str(out), "--out", str(tmp_path / "a")]) == 0
    assert main(["analyze", str(out), "--compare"]) == 2


def test_extrapolate_from_csv(tmp_path, capsys):
    pairs = tmp_path / "pairs.csv"
    betas = [3000.0, 4000.0, 5000.0, 6000.0]
    pairs.write_text("beta,value\n" + "".join(f"{b!r},{0.9 + 40.0 / b!r}\n" for b in betas))
    report = tmp_path / "fit.txt"
    assert main(["extrapolate", str(pairs), "--out", str(report)]) == 0
    text = report.read_text()
    intercept = float(next(line for line in text.splitlines() if line.startswith("intercept =")).split("=")[1])
    assert intercept == pytest.approx(0.9, abs=1e-12)
    (tmp_path / "short.csv").write_text("3000,1\n4000,1\n")
    assert main(["extrapolate", str(tmp_path / "short.csv")]) == 2


def test_report_path_writes_figures(tmp_path):
    ini = write_ini(tmp_path / "r.ini", var_steps=60, md_steps=5, nbeads=8, mu=1e-5, window=10)
    run = tmp_path / "run"
    assert main(["run-1d", "--config", str(ini), "--out", str(run)]) == 0
    assert main(["analyze", str(run), "--compare"]) == 0
    for name in ("np.csv", "ntilde.csv", "free_energy.csv", "np_exact.csv", "comparison.json",
                 "distributions.png", "convergence.png", "comparison.png"):
        assert (run / "analysis" / name).exists(), name


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "openpimd.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "extrapolate" in proc.stdout
