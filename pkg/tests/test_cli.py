"""CLI smoke tests: artifacts, idempotence, dominance, and failure handling."""

import json
import os

import pytest
from click.testing import CliRunner

from drbrt.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def test_build_smoke_and_idempotence(tmp_path, runner):
    args = ["build", "--scene", "di", "--builder", "max_cov_ball", "--iters", "4",
            "--seed", "5", "--out", str(tmp_path)]
    res = runner.invoke(main, args)
    assert res.exit_code == 0, res.output
    tree_path = tmp_path / "tree_max_cov_ball_5.json"
    log_path = tmp_path / "build_max_cov_ball_5.jsonl"
    assert tree_path.exists() and log_path.exists()
    first = tree_path.read_bytes()
    log_first = log_path.read_bytes()
    res = runner.invoke(main, args)
    assert res.exit_code == 0
    assert tree_path.read_bytes() == first  # byte-identical rerun
    assert log_path.read_bytes() == log_first
    # the log carries per-iteration status and candidate objectives
    entries = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert all("status" in e for e in entries)
    assert any("lambda_mc" in e for e in entries)


def test_build_loads_and_validates(tmp_path, runner):
    res = runner.invoke(main, ["build", "--scene", "di", "--iters", "4", "--seed", "2",
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["validate", "--tree",
                               str(tmp_path / "tree_max_cov_ball_2.json"),
                               "--scene", "di", "--mc-samples", "1500",
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    report = json.loads((tmp_path / "validate.json").read_text())
    assert report["edges"] and all(e["pass"] for e in report["edges"])


def test_coverage_csv_shape(tmp_path, runner):
    res = runner.invoke(main, ["coverage", "--scene", "di", "--builder", "max_covar",
                               "--iters", "3", "--seeds", "1,2", "--queries", "30",
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "coverage_max_covar.csv").read_text().splitlines()
    assert lines[0].startswith("seed,builder,fraction")
    assert len(lines) == 4  # header + 2 seeds + summary
    assert lines[-1].startswith("all,")


def test_compare_dominance_column(tmp_path, runner):
    res = runner.invoke(main, ["compare", "--scene", "di", "--iters", "6",
                               "--seeds", "3,4,5", "--queries", "40",
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "compare_ball.csv").read_text().splitlines()
    assert len(lines) == 4
    assert all(line.endswith("true") for line in lines[1:])


def test_sweep_grid_shape(tmp_path, runner):
    res = runner.invoke(main, ["sweep", "--scene", "quadrotor",
                               "--wc-grid", "1.8e-4,5e-4", "--umax-grid", "4,8",
                               "--seeds", "0", "--iters", "2", "--queries", "20",
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "w_c,u_max,gain,fraction"
    assert len(lines) == 5  # header + exactly 4 data cells


def test_error_is_machine_readable(tmp_path, runner):
    res = runner.invoke(main, ["build", "--scene", "no_such_scene",
                               "--out", str(tmp_path)])
    assert res.exit_code == 1
    err = json.loads(res.stderr.splitlines()[-1])
    assert err["error"] == "FileNotFoundError"
    assert not any(p.name.startswith(".tmp-") for p in tmp_path.iterdir())


def test_duplicate_seeds_rejected(tmp_path, runner):
    res = runner.invoke(main, ["coverage", "--scene", "di", "--seeds", "1,1",
                               "--iters", "1", "--out", str(tmp_path)])
    assert res.exit_code == 1
    err = json.loads(res.stderr.splitlines()[-1])
    assert "distinct" in err["message"]
