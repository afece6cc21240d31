import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from deepfact.cli import EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, load_config, main
from deepfact.errors import ConfigError
from deepfact.theory import closed_form_L2

BLOCK_GD = """
dim = 3
depth = {depth}
[init]
scheme = "alpha_m"
alpha = {alpha}
m = {m}
[obs]
mode = "block"
count = 3
[integrator]
method = "gd"
step = 1e-2
t_max = 200
stop_loss = 1e-10
record_every = 2000
"""


def write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, command, text, *extra):
    cfg = write(tmp_path, text)
    out = tmp_path / command
    code = main([command, "--config", cfg, "--out", str(out), *extra])
    return code, out


class TestExitCodes:
    def test_parse_error(self, tmp_path, capsys):
        assert run(tmp_path, "theory", "dim = [\n")[0] == EXIT_PARSE
        assert "cannot parse" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["theory", "--config", str(tmp_path / "nope.toml")]) == EXIT_PARSE

    def test_unknown_key(self, tmp_path, capsys):
        assert run(tmp_path, "theory", "dim = 3\nfoo = 1\n")[0] == EXIT_VALIDATION
        assert "foo" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "text",
        [
            "dim = 0\n",
            "dim = 3\ndepth = 0\n",
            "dim = 3\n[init]\nscheme = \"nope\"\n",
            "dim = 3\n[integrator]\nmethod = \"leapfrog\"\n",
            "dim = 3\n[init]\nalpha = -1\n",
            "kind = \"sweep\"\ndim = 3\n",
        ],
    )
    def test_validation_errors(self, tmp_path, text):
        assert run(tmp_path, "theory", text)[0] == EXIT_VALIDATION

    def test_negative_seed(self, tmp_path):
        cfg = write(tmp_path, BLOCK_GD.format(depth=2, alpha=0.1, m=2))
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "-1"]) == EXIT_VALIDATION

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            main(["frobnicate", "--config", "x.toml"])


class TestConfig:
    def test_lists_and_infinity(self, tmp_path):
        cfg = load_config(write(tmp_path, BLOCK_GD.format(depth="[2, 3]", alpha="[0.1, 0.2]", m='[2, "inf"]')), "theory")
        assert cfg.depths == (2, 3)
        assert cfg.alphas == (0.1, 0.2)
        assert cfg.ms == (2.0, float("inf"))

    def test_block_spec_from_count(self, tmp_path):
        cfg = load_config(write(tmp_path, BLOCK_GD.format(depth=2, alpha=0.1, m=2)), "simulate")
        assert cfg.block_spec.num_blocks == 3
        assert cfg.block_spec.block_size == 1

    def test_gd_iterations_cover_t_max(self, tmp_path):
        cfg = load_config(write(tmp_path, BLOCK_GD.format(depth=2, alpha=0.1, m=2)), "simulate")
        assert cfg.settings().max_iters == 20000


class TestSubcommands:
    def test_theory_matches_closed_form(self, tmp_path):
        code, out = run(tmp_path, "theory", BLOCK_GD.format(depth="[2, 3]", alpha=0.1, m='[2, "inf"]'))
        assert code == EXIT_OK
        rows = read_csv(out / "theory.csv")
        assert list(rows[0]) == ["depth", "m", "alpha", "branch", "sigma1", "sigma_secondary", "srank_limit"]
        assert [(r["depth"], r["m"]) for r in rows] == [("2", "2.0"), ("2", "inf"), ("3", "2.0"), ("3", "inf")]
        want = closed_form_L2(2.0, 3, 3, 1, 1.0)
        assert float(rows[0]["sigma1"]) == pytest.approx(want.sigma1, rel=1e-12)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["kind"] == "theory" and summary["all_converged"]

    def test_simulate_trajectory(self, tmp_path):
        code, out = run(tmp_path, "simulate", BLOCK_GD.format(depth=2, alpha=0.1, m=2))
        assert code == EXIT_OK
        rows = read_csv(out / "trajectory.csv")
        assert list(rows[0])[:5] == ["trial", "t", "loss", "sigma_1", "sigma_2"]
        assert float(rows[-1]["loss"]) <= 1e-10
        times = [float(r["t"]) for r in rows]
        assert times == sorted(times)

    def test_zero_loss_start_gives_one_row(self, tmp_path):
        # alpha_m with m = inf and alpha = 1 is the identity, which fits the block target exactly.
        code, out = run(tmp_path, "simulate", BLOCK_GD.format(depth=2, alpha=1.0, m='"inf"'))
        assert code == EXIT_OK
        rows = read_csv(out / "trajectory.csv")
        assert len(rows) == 1 and float(rows[0]["loss"]) == 0.0

    def test_coupling(self, tmp_path):
        code, out = run(tmp_path, "coupling", BLOCK_GD.format(depth="[2, 3]", alpha=0.1, m=2))
        assert code == EXIT_OK
        verdicts = [r["verdict"] for r in read_csv(out / "coupling.csv")]
        assert verdicts == ["decoupled", "coupled"]

    def test_sweep_uses_reduced_route_for_tiny_scale(self, tmp_path):
        text = BLOCK_GD.format(depth=2, alpha="[1e-6, 0.1]", m=2).replace('"gd"', '"rk4"')
        code, out = run(tmp_path, "sweep", text)
        assert code == EXIT_OK
        rows = read_csv(out / "sweep.csv")
        assert [r["route"] for r in rows] == ["reduced", "full"]
        for r in rows:
            assert float(r["sigma1"]) == pytest.approx(float(r["predicted_sigma1"]), rel=1e-4)

    def test_metrics(self, tmp_path):
        code, out = run(tmp_path, "metrics", "dim = 4\n[truth]\nkind = \"rank_r\"\nrank = 2\nseed = 3\n[obs]\nmode = \"diagonal\"\n")
        assert code == EXIT_OK
        report = json.loads((out / "metrics.json").read_text())
        sv = np.array(report["ground_truth"]["singular_values"])
        assert np.sum(sv > 1e-9 * sv[0]) == 2
        assert report["observed_count"] == 4

    def test_plasticity(self, tmp_path):
        text = """
dim = 6
depth = 2
trials = 1
[init]
scheme = "gaussian"
std = 0.05
[obs]
count = [12, 20]
seed = 1
[truth]
kind = "rank_r"
rank = 1
[integrator]
method = "gd"
step = 2e-2
t_max = 400
stop_loss = 1e-8
"""
        code, out = run(tmp_path, "plasticity", text)
        assert code == EXIT_OK
        rows = read_csv(out / "plasticity.csv")
        assert [r["mode"] for r in rows] == ["pre-only", "warm", "cold"]
        warm = rows[1]
        pre = rows[0]
        # Warm training starts where pre-training ended.
        assert float(warm["initial_loss"]) >= float(pre["final_loss"])


def test_outputs_are_deterministic(tmp_path):
    text = BLOCK_GD.format(depth="[2, 3]", alpha=0.1, m='[2, "inf"]')
    a = run(tmp_path, "simulate", text, "--seed", "5")[1]
    b_dir = tmp_path / "again"
    b_dir.mkdir()
    b = run(b_dir, "simulate", text, "--seed", "5", "--threads", "2")[1]
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()


def test_console_entry_point(tmp_path):
    cfg = write(tmp_path, BLOCK_GD.format(depth=2, alpha=0.1, m=2))
    proc = subprocess.run(
        [sys.executable, "-m", "deepfact.cli", "theory", "--config", cfg, "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "theory.csv").exists()
