import json
import subprocess
import sys

import numpy as np
import pytest

from relaxround.cli import PRESETS, load_config, main
from relaxround.rounding import TimeGrid, read_controls_csv, write_controls_csv


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestRound:
    def test_half_half(self, tmp_path, capsys):
        src = write(tmp_path, "c.csv", "t_start,t_end,mode_1,mode_2\n0,1,0.5,0.5\n1,2,0.5,0.5\n")
        assert main(["round", str(src)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["output"] == str(tmp_path / "c_rounded.csv")
        _, beta, _ = read_controls_csv(tmp_path / "c_rounded.csv")
        assert np.array_equal(beta, [[1, 0], [0, 1]])
        assert report["bound"] == 1.0 and report["within_bound"]

    def test_one_hot_identical(self, tmp_path):
        g = TimeGrid([0, 0.5, 1.5, 2.0])
        a = np.eye(3)[[2, 0, 1]]
        src = tmp_path / "h.csv"
        write_controls_csv(src, g, a, np.array([[1.5], [-2.0], [0.0]]))
        out = tmp_path / "o.csv"
        assert main(["round", str(src), "-o", str(out)]) == 0
        assert out.read_text() == src.read_text()

    def test_bound_column(self, tmp_path, capsys):
        g = TimeGrid([0, 0.5, 2.0, 2.5])
        src = tmp_path / "c.csv"
        write_controls_csv(src, g, np.full((3, 4), 0.25))
        rep = tmp_path / "rep.json"
        assert main(["round", str(src), "--report", str(rep)]) == 0
        assert json.loads(rep.read_text())["bound"] == 3 * 1.5

    def test_malformed_line_number(self, tmp_path, capsys):
        src = write(tmp_path, "bad.csv", "t_start,t_end,mode_1,mode_2\n0,1,0.5,0.5\n1,2,0.5,oops\n")
        assert main(["round", str(src)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_not_on_simplex(self, tmp_path, capsys):
        src = write(tmp_path, "bad.csv", "t_start,t_end,mode_1,mode_2\n0,1,0.7,0.7\n")
        assert main(["round", str(src)]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["round", str(tmp_path / "nope.csv")]) == 2


class TestConfig:
    def test_defaults(self):
        cfg = load_config("heat")
        assert cfg["algorithm"]["k_max"] == 2
        assert cfg["grid"]["n_cells"] == 8
        assert cfg["budget"] == []

    def test_ini_overlay(self, tmp_path):
        ini = write(tmp_path, "a.ini", "[algorithm]\nepsilon = 0.5\nwarm_start = no\n[budget]\n1->2 = 3\n")
        cfg = load_config("lotka", str(ini))
        assert cfg["algorithm"]["epsilon"] == 0.5
        assert cfg["algorithm"]["warm_start"] is False
        assert cfg["budget"] == [(1, 2, 3)]
        assert PRESETS["lotka"]["algorithm"]["epsilon"] == 1e-3  # presets untouched

    @pytest.mark.parametrize("text", ["[model]\nbogus = 1\n", "[nosuch]\nx = 1\n", "[model]\nh = abc\n"])
    def test_invalid_ini(self, tmp_path, text):
        ini = write(tmp_path, "bad.ini", text)
        assert main(["experiment", "lotka", "--config", str(ini), "--out", str(tmp_path / "o")]) == 2

    @pytest.mark.parametrize("args", [
        ["--set", "model.t_final=0"],
        ["--set", "model.nosuch=1"],
        ["--set", "garbage"],
        ["--budget", "1,1,2"],
        ["--budget", "1,2"],
        ["--mode", "minmax"],
        ["--budget", "1,5,1", "--mode", "minmax"],
    ])
    def test_rejected_overrides(self, tmp_path, args):
        assert main(["experiment", "lotka", "--out", str(tmp_path / "o"), *args]) == 2
        assert not (tmp_path / "o" / "history.csv").exists()

    def test_t_final_zero_in_file(self, tmp_path):
        ini = write(tmp_path, "t.ini", "[model]\nt_final = 0\n")
        assert main(["experiment", "heat", "--config", str(ini), "--out", str(tmp_path / "o")]) == 2

    def test_usage_errors(self):
        assert main([]) == 2
        assert main(["experiment", "nosuch"]) == 2
        assert main(["verify", "nosuch"]) == 2


class TestExperimentSmoke:
    def test_small_lotka_minmax(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["experiment", "lotka", "--out", str(out), "--mode", "minmax", "--budget", "1,2,1",
                     "--budget", "2,1,1", "--refinements", "1", "--set", "model.h=0.25",
                     "--set", "grid.nodes=0,5,10,15", "--set", "algorithm.max_iters=10",
                     "--set", "algorithm.integration_tol=0.1"])
        assert code == 0
        for name in ("history.csv", "controls.csv", "relaxed_controls.csv", "state_norm.csv", "manifest.json"):
            assert (out / name).exists()
        header = (out / "history.csv").read_text().splitlines()[0]
        assert header == "k,dt_max,eps_k,J_rel,J_int,rel_error,term_reason"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["budget"] == [[1, 2, 1], [2, 1, 1]]
        assert all(v <= 1 for v in manifest["switches"].values())
        _, beta, _ = read_controls_csv(out / "controls.csv")
        assert np.all(beta.sum(axis=1) == 1)
        assert capsys.readouterr().out.startswith("k,dt_max")

    def test_deterministic(self, tmp_path):
        args = ["--set", "model.h=0.25", "--set", "grid.nodes=0,7.5,15", "--refinements", "0",
                "--set", "algorithm.max_iters=5", "--set", "algorithm.integration_tol=0.1"]
        assert main(["experiment", "lotka", "--out", str(tmp_path / "a"), *args]) == 0
        assert main(["experiment", "lotka", "--out", str(tmp_path / "b"), *args]) == 0
        for name in ("history.csv", "controls.csv", "state_norm.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestVerify:
    def test_rounding_suite(self, tmp_path, capsys):
        out = tmp_path / "v.json"
        assert main(["verify", "rounding", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report[0]["name"] == "sur_bound" and report[0]["passed"]

    def test_console_script_entry(self):
        proc = subprocess.run([sys.executable, "-m", "relaxround.cli", "verify", "estimate"],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0
        lines = [json.loads(x) for x in proc.stdout.splitlines()]
        assert {x["name"] for x in lines} == {"estimate_state_bound", "estimate_dt_slope"}
