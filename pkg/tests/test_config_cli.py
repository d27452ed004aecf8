import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hingeplate.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, execute, main
from hingeplate.config import ConfigError, parse_config

MINIMAL = """
[geometry]
kind = "hinged"
N = 8
"""

SIMULATE = """
[geometry]
kind = "hinged"
N = 16

[nonlinearity]
coefficients = [0.0, 0.0, 1.0]
tag = "defocusing"

[damping]
boxes = [[0.785398, 2.356194]]

[run]
T = 0.5
dt = 1e-2
"""

STEER = """
[geometry]
kind = "torus"
N = 9
beta = 1.0

[nonlinearity]
coefficients = [-2.0, 0.0, 1.0]
tag = "asymptotic-defocusing"
R = 2.0

[damping]
boxes = [[0.0, 3.141592653589793]]

[run]
T = 2.0
dt = 0.01
seeds = [-1.5, 0.0, 1.5]
start = 1.0
end = -1.0
max_coast = 200.0
"""


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL, mode="simulate")
    assert cfg.get("geometry", "d") == 1
    assert cfg.get("run", "dt") == 1e-2
    assert cfg.mode == "simulate"


def test_torus_without_mass_term():
    with pytest.raises(ConfigError, match="Poincaré"):
        parse_config('[geometry]\nkind = "torus"\nN = 8\nbeta = 0.0\n', mode="simulate")


def test_duplicate_key_reports_both_lines():
    text = '[geometry]\nkind = "hinged"\nN = 8\nN = 16\n'
    with pytest.raises(ConfigError) as info:
        parse_config(text, mode="simulate")
    assert "duplicate key geometry.N on lines 3 and 4" in info.value.errors


def test_all_errors_are_collected():
    text = '[geometry]\nkind = "disk"\nN = 8\nshape = 1\n[run]\nT = -1.0\ntol = 5.0\n[extra]\n'
    with pytest.raises(ConfigError) as info:
        parse_config(text, mode="simulate")
    errs = " | ".join(info.value.errors)
    for needle in ("unknown section [extra]", "unknown key geometry.shape", "geometry.kind", "run.T", "run.tol"):
        assert needle in errs
    assert len(info.value.errors) >= 5


def test_type_errors_and_missing_sections():
    with pytest.raises(ConfigError) as info:
        parse_config('[geometry]\nkind = "hinged"\nN = "eight"\n', mode="hum")
    errs = " | ".join(info.value.errors)
    assert "geometry.N must be" in errs


def test_overrides_and_digest():
    a = parse_config(MINIMAL, ["run.T=2.0"], mode="simulate")
    b = parse_config(MINIMAL, ["run.T=2.0"], mode="simulate")
    c = parse_config(MINIMAL, ["run.T=3.0"], mode="simulate")
    assert a.get("run", "T") == 2.0
    assert a.digest() == b.digest() != c.digest()
    with pytest.raises(ConfigError):
        parse_config(MINIMAL, ["run.bogus=1"], mode="simulate")


def test_zero_data_give_zero_energy(tmp_path):
    code = execute("simulate", SIMULATE, ["run.data_norm=0.0"], tmp_path)
    assert code == EXIT_OK
    data = np.loadtxt(tmp_path / "energy.csv", delimiter=",", skiprows=1)
    assert not np.any(data[:, 1:])
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["status"] == "ok" and report["headline"]["E0"] == 0.0


def test_simulate_report_and_csv_agree(tmp_path):
    assert execute("simulate", SIMULATE, [], tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    data = np.loadtxt(tmp_path / "energy.csv", delimiter=",", skiprows=1)
    assert report["headline"]["E0"] == data[0, 1]
    summary = dict(line.split(",") for line in (tmp_path / "summary.csv").read_text().splitlines()[1:])
    assert float(summary["balance_defect"]) == report["headline"]["balance_defect"] <= 1e-6
    assert {"energy.csv", "summary.csv", "report.json"} <= set(report["files"])
    numeric = {k for k, v in report["headline"].items() if isinstance(v, (int, float))}
    assert numeric == set(summary)


def test_runs_are_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert execute("simulate", SIMULATE, [], a, seed=7) == EXIT_OK
    assert execute("simulate", SIMULATE, [], b, seed=7) == EXIT_OK
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    ra.pop("timestamp"), rb.pop("timestamp")
    ra["config"]["output"], rb["config"]["output"] = None, None
    ra.pop("config_hash"), rb.pop("config_hash")
    assert ra == rb
    assert (a / "energy.csv").read_bytes() == (b / "energy.csv").read_bytes()


def test_config_error_exit_code(tmp_path, capsys):
    code = execute("simulate", '[geometry]\nkind = "torus"\nN = 8\n', [], tmp_path)
    assert code == EXIT_CONFIG
    assert "Poincaré" in capsys.readouterr().err
    assert json.loads((tmp_path / "report.json").read_text())["exit_code"] == EXIT_CONFIG


@pytest.mark.parametrize("mode,extra", [
    ("observability", ["run.T_values=[1.0, 2.0]"]),
    ("hum", ["run.T=2.0"]),
    ("local-control", ["run.T=2.0", "run.data_norm=0.01"]),
    ("equilibria", []),
])
def test_other_modes_run(tmp_path, mode, extra):
    assert execute(mode, SIMULATE, extra, tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["status"] == "ok"
    for name in report["files"]:
        assert (tmp_path / name).exists()


def test_steer_with_unreachable_tolerance_fails_cleanly(tmp_path):
    code = execute("steer", STEER, ["run.tol=1e-30"], tmp_path)
    assert code == EXIT_SOLVER
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["status"] == "no-convergence"
    assert report["diagnostics"]["failing_leg"]["kind"] == "local-control"


def test_main_entry_point(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text(SIMULATE)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--set", "run.T=0.1"]) == EXIT_OK
    assert main(["simulate", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG


def test_module_invocation(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text(SIMULATE)
    proc = subprocess.run([sys.executable, "-m", "hingeplate", "simulate", "--config", str(cfg), "--out",
                           str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "scenarios").glob("*.toml")),
                         ids=lambda p: p.stem)
def test_shipped_scenarios_validate(path):
    cfg = parse_config(path.read_text())
    assert cfg.mode == path.stem
