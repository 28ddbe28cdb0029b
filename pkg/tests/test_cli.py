import json
import re

import numpy as np
import pytest

from skistunt.cli import main
from skistunt.gp import GpModel


def run(*argv):
    return main([str(a) for a in argv])


class TestTrainGp:
    def test_override_rows(self, tmp_path, capsys):
        out = tmp_path / "gp.json"
        assert run("train-gp", "--out", out, "--override", "n_samples=10",
                   "--override", "restarts=1", "--override", "max_iter=20") == 0
        assert GpModel.load(out).n == 10
        assert "held-out RMSE phi" in capsys.readouterr().out

    def test_noise_floor(self, tmp_path, capsys):
        out = tmp_path / "gp.json"
        assert run("train-gp", "--out", out, "--override", "n_samples=150",
                   "--override", "residual=false", "--override", "restarts=1") == 0
        rmse = [float(v) for v in re.findall(r"held-out RMSE \w+: ([\d.]+)", capsys.readouterr().out)]
        assert len(rmse) == 3 and max(rmse) <= 0.01 * 1.5

    def test_config_error(self, tmp_path):
        assert run("train-gp", "--out", tmp_path / "g.json", "--override", "bogus=1") == 2
        assert run("train-gp", "--out", tmp_path / "g.json", "--override", "n_samples=1") == 2


class TestRun:
    def test_run_writes_artifacts(self, tmp_path):
        assert run("run", "--config", "fig4", "--out", tmp_path, "--deterministic",
                   "--override", "duration=0.2", "--plot") == 0
        assert (tmp_path / "fig4.csv").exists() and (tmp_path / "fig4.json").exists()
        svg = (tmp_path / "fig4_phase.svg").read_text()
        assert svg.count('stroke-dasharray="6 4"') == 3  # phi_max and both phi_dot_max lines
        assert "<!--" not in svg

    def test_sweep_writes_one_log_per_value(self, tmp_path):
        assert run("sweep", "--config", "fig2", "--out", tmp_path, "--deterministic",
                   "--override", "duration=0.1", "--jobs", "2") == 0
        assert sorted(p.name for p in tmp_path.glob("*.csv")) == [
            f"fig2_H{h}.csv" for h in sorted([1, 5, 10, 15], key=str)]
        table = (tmp_path / "fig2_table.md").read_text()
        assert table.count("| fig2_H") == 4

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SKISTUNT_OUT", str(tmp_path / "env"))
        assert run("run", "--config", "fig4", "--nominal-only", "--override", "duration=0.1") == 0
        assert (tmp_path / "env" / "fig4.csv").exists()

    def test_config_errors(self, tmp_path):
        assert run("run", "--config", tmp_path / "missing.json", "--out", tmp_path) == 2
        assert run("run", "--config", "fig4", "--out", tmp_path, "--override", "dt=-1") == 2

    def test_gp_artifact_error(self, tmp_path):
        bad = tmp_path / "gp.json"
        bad.write_text(json.dumps({"version": 9}))
        assert run("run", "--config", "fig4", "--out", tmp_path, "--gp", bad) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_aborted_run_exit_code(self, tmp_path):
        # a roll rate far beyond anything physical makes the plant blow up
        code = run("run", "--config", "fig4", "--out", tmp_path, "--nominal-only",
                   "--override", "initial.phi_dot=1e300", "--override", "duration=0.1")
        assert code == 1
        assert json.loads((tmp_path / "fig4.json").read_text())["aborted"]


class TestPlotAndTable:
    def test_straight_trajectory(self, tmp_path):
        cfg = tmp_path / "line.json"
        cfg.write_text(json.dumps({"schema_version": 1, "name": "line", "initial": {"v": 2.0},
                                   "reference": {"kind": "line", "a": 2.0, "b": 0.0},
                                   "duration": 0.5, "controller": {"use_gp": False}}))
        assert run("run", "--config", cfg, "--out", tmp_path, "--deterministic", "--plot") == 0
        svg = (tmp_path / "line_trajectory.svg").read_text()
        pts = re.search(r'<polyline points="([^"]+)"', svg).group(1).split()
        ys = {p.split(",")[1] for p in pts}
        assert len(ys) == 1

    def test_plot_is_pure(self, tmp_path):
        assert run("run", "--config", "fig4", "--out", tmp_path / "a", "--deterministic",
                   "--nominal-only", "--override", "duration=0.2") == 0
        outs = []
        for k in range(2):
            d = tmp_path / f"p{k}"
            assert run("plot", tmp_path / "a" / "fig4.csv", "--config", "fig4", "--out", d,
                       "--deterministic") == 0
            outs.append({p.name: p.read_bytes() for p in d.glob("*.svg")})
        assert outs[0] == outs[1] and "fig4_phase.svg" in outs[0]

    def test_table(self, tmp_path, capsys):
        run("run", "--config", "fig4", "--out", tmp_path, "--nominal-only", "--override", "duration=0.1")
        capsys.readouterr()
        assert run("table", tmp_path) == 0
        assert "| fig4 |" in capsys.readouterr().out
        assert run("table", tmp_path / "nothing") == 2
