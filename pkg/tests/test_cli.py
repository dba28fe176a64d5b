import numpy as np
import pandas as pd
import pytest

import main
from app.errors import SolverFailureError

RUN = """
[run]
t0 = 0.05
t_end = 0.1
tau = 0.025
adaptive = false

[mesh]
nx = 4
ny = 2

[initial]
kind = {initial}
"""

CONVERGENCE = """
[run]
t0 = 0.05
t_end = 0.1
tau = 0.05

[mesh]
kind = staggered
n = 2
m = 3

[convergence]
levels = 2
"""


def config_file(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_cli(*args):
    return main.main(list(args))


def test_run_writes_trajectory_and_final_state(tmp_path):
    out = tmp_path / "out"
    config = config_file(tmp_path, RUN.format(initial="fp_exact"))
    assert run_cli("run", "--config", config, "--output-dir", str(out)) == 0

    trajectory = pd.read_csv(out / "trajectory.csv")
    assert list(trajectory.columns) == ["t", "tau", "energy", "mass", "newton_iters"]
    np.testing.assert_allclose(trajectory["t"], [0.05, 0.075, 0.1])
    final = pd.read_csv(out / "final_state.csv")
    assert list(final.columns) == ["cell_id", "x", "y", "rho"]
    assert len(final) == 8


def test_run_is_deterministic(tmp_path):
    config = config_file(tmp_path, RUN.format(initial="fp_exact"))
    for name in ("a", "b"):
        assert run_cli("run", "--config", config, "--output-dir", str(tmp_path / name)) == 0
    for csv in ("trajectory.csv", "final_state.csv"):
        assert (tmp_path / "a" / csv).read_bytes() == (tmp_path / "b" / csv).read_bytes()


@pytest.mark.parametrize("scheme", ["ljko", "euler"])
def test_equilibrium_run_is_stationary(tmp_path, scheme):
    out = tmp_path / "out"
    config = config_file(tmp_path, RUN.format(initial="equilibrium"))
    assert run_cli("run", "--config", config, "--scheme", scheme, "--output-dir", str(out)) == 0
    trajectory = pd.read_csv(out / "trajectory.csv")
    np.testing.assert_allclose(trajectory["energy"], trajectory["energy"].iloc[0], atol=1e-12)
    np.testing.assert_allclose(trajectory["mass"], 1.0, rtol=1e-12)


def test_convergence_writes_tables(tmp_path):
    out = tmp_path / "out"
    config = config_file(tmp_path, CONVERGENCE)
    assert run_cli("convergence", "--config", config, "--output-dir", str(out)) == 0

    lines = (out / "convergence_ljko.csv").read_text().splitlines()
    assert lines[0] == "h,dt,err_linf,rate_linf,err_l1,rate_l1"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[3] == "" and first[5] == ""
    assert lines[2].split(",")[3] != ""

    side = pd.read_csv(out / "convergence.csv")
    assert list(side.columns[:2]) == ["h", "dt"]
    assert {"euler_rate_l1", "ljko_rate_l1"} <= set(side.columns)
    markdown = (out / "convergence.md").read_text()
    assert "## ljko" in markdown and "## euler" in markdown


def test_dissipation_writes_three_series(tmp_path):
    out = tmp_path / "out"
    config = config_file(tmp_path, RUN.format(initial="fp_exact"))
    assert run_cli("dissipation", "--config", config, "--output-dir", str(out)) == 0
    for name in ("ljko", "euler", "exact"):
        frame = pd.read_csv(out / f"dissipation_{name}.csv")
        assert list(frame.columns) == ["t", "dissipation"]
        assert len(frame) == 3
        assert (frame["dissipation"] >= -1e-12).all()


def test_invalid_config_exits_2(tmp_path, capsys):
    config = config_file(tmp_path, "[run]\ntau = -1\nt_end = 1\n")
    assert run_cli("run", "--config", config) == 2
    assert "Invalid input" in capsys.readouterr().out


def test_missing_config_exits_2(tmp_path):
    assert run_cli("run", "--config", str(tmp_path / "missing.ini")) == 2


def test_convergence_needs_fokker_planck(tmp_path):
    config = config_file(tmp_path, CONVERGENCE + "\n[energy]\nkind = porous_medium\n")
    assert run_cli("convergence", "--config", config) == 2


def test_solver_failure_exits_3(tmp_path, monkeypatch, capsys):
    def failing(*args, **kwargs):
        raise SolverFailureError("forced", 30, 1.0, 0.025, 1)

    monkeypatch.setitem(main.SCHEMES, "ljko", failing)
    config = config_file(tmp_path, RUN.format(initial="fp_exact"))
    assert run_cli("run", "--config", config, "--output-dir", str(tmp_path / "out")) == 3
    assert "Solver failure" in capsys.readouterr().out


def test_config_flag_is_required():
    with pytest.raises(SystemExit) as info:
        run_cli("run")
    assert info.value.code == 2
