import csv

import numpy as np
import pytest

from rdelab.cli import build_config, main, parse_config_text
from rdelab.envs import EnvSpec, to_tabular, value_iteration

TINY = """\
# small four-rooms run
algorithm = rde
env_size = 7
max_steps = 20
total_env_steps = 240
eval_every = 80
eval_episodes = 2
hidden = [16]
batch_size = 8
base_reset_interval = 120
eps_decay_steps = 200
target_period = 50
"""


def write(tmp_path, text, name="cfg.conf"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestParsing:
    def test_values(self):
        raw = parse_config_text("a = 1\nb = 2.5  # trailing\nc = true\nd = rde\ne = [1, 2]\nf = 'x'\n")
        assert raw == {"a": 1, "b": 2.5, "c": True, "d": "rde", "e": [1, 2], "f": "x"}

    def test_unknown_key(self, tmp_path, capsys):
        assert main(["run", write(tmp_path, "betaa = 3\n"), "--out", str(tmp_path / "o")]) == 1
        assert "betaa" in capsys.readouterr().err

    def test_bad_type_names_key(self, tmp_path, capsys):
        assert main(["run", write(tmp_path, "n_agents = lots\n"), "--out", str(tmp_path / "o")]) == 1
        assert "n_agents" in capsys.readouterr().err

    def test_missing_equals(self, tmp_path):
        assert main(["run", write(tmp_path, "beta 3\n"), "--out", str(tmp_path / "o")]) == 1

    def test_sweep_axes(self):
        cfg, axes = build_config({"sweep_seeds": [0, 1], "sweep_algorithm": ["base", "rde"], "beta": 10})
        assert axes == {"seeds": [0, 1], "algorithm": ["base", "rde"]} and cfg.beta == 10.0

    def test_missing_file_is_io_error(self, tmp_path):
        assert main(["run", str(tmp_path / "absent.conf"), "--out", str(tmp_path / "o")]) == 3


class TestRun:
    def test_twice_identical(self, tmp_path):
        cfg = write(tmp_path, TINY)
        for name in ("a", "b"):
            assert main(["run", cfg, "--out", str(tmp_path / name), "--seed", "4", "--quiet"]) == 0
        assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()

    def test_resolved_config_reproduces(self, tmp_path):
        assert main(["run", write(tmp_path, TINY), "--out", str(tmp_path / "a"), "--seed", "2", "--quiet"]) == 0
        resolved = tmp_path / "a" / "config.resolved"
        text = resolved.read_text()
        assert "seed = 2" in text and "gamma = 0.99" in text
        assert main(["run", str(resolved), "--out", str(tmp_path / "b"), "--quiet"]) == 0
        assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()
        assert (tmp_path / "b" / "config.resolved").read_text() == text

    def test_divergence_exit_code(self, tmp_path):
        with np.errstate(all="ignore"):
            code = main(["run", write(tmp_path, TINY + "lr = 1e200\n"), "--out", str(tmp_path / "o"), "--quiet"])
        assert code == 2

    def test_unwritable_out(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["run", write(tmp_path, TINY), "--out", str(blocker / "sub"), "--quiet"]) == 3


def test_oracle_chain(tmp_path, capsys):
    cfg = write(tmp_path, "env_kind = chain\nenv_size = 5\ngamma = 0.9\nalgorithm = base\n")
    assert main(["oracle", cfg, "--out", str(tmp_path / "o")]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    rows = list(csv.reader(printed))[1:]
    q = np.array([[float(v) for v in r[1:3]] for r in rows])
    expected = value_iteration(to_tabular(EnvSpec("chain", size=5, gamma=0.9)), 0.9, tol=1e-12)
    assert np.max(np.abs(q - expected)) < 1e-6


def test_oracle_rejects_random_goal(tmp_path):
    assert main(["oracle", write(tmp_path, "env_size = 7\n"), "--out", str(tmp_path / "o")]) == 1


def test_sweep_aggregate_plot(tmp_path):
    text = TINY + "sweep_seeds = [0, 1]\nsweep_algorithm = [base, rde]\n"
    out = tmp_path / "sw"
    assert main(["sweep", write(tmp_path, text), "--out", str(out), "--quiet"]) == 0
    report = list(csv.DictReader((out / "report.csv").open()))
    assert [r["algorithm"] for r in report] == ["base", "rde"]

    agg_out = tmp_path / "agg"
    assert main(["aggregate", str(out), "--out", str(agg_out), "--quiet"]) == 0
    agg = {r["group"]: r for r in csv.DictReader((agg_out / "aggregate.csv").open())}
    for i, row in enumerate(report):
        assert float(agg[f"cell_{i:03d}"]["final_iqm"]) == pytest.approx(float(row["final_iqm"]), abs=1e-12)

    plot_out = tmp_path / "plot"
    assert main(["emit-plot-data", str(out), "--out", str(plot_out), "--quiet"]) == 0
    rows = list(csv.DictReader((plot_out / "plot_data.csv").open()))
    assert {r["metric"] for r in rows} >= {"eval_return_mean", "p_select_0"}
    assert len({r["run"] for r in rows}) == 4


def test_aggregate_empty_dir(tmp_path):
    assert main(["aggregate", str(tmp_path), "--out", str(tmp_path / "o"), "--quiet"]) == 3
