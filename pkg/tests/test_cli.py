import json
import os

import numpy as np
import pytest

from fgail import cli
from fgail.env import read_demos
from fgail.metrics import read_csv

SMALL = {"env_id": "gridworld", "demo_count": 3, "epochs": 2, "pairs_per_epoch": 60,
         "policy_hidden": [8, 8], "reward_hidden": [8, 8, 8],
         "ficnn": {"layer_count": 2, "nodes_per_layer": 8}}


def run(tmp_path, command, cfg, *extra):
    path = tmp_path / f"{command}.json"
    path.write_text(json.dumps(cfg))
    return cli.main([command, "--config", str(path), "--out", str(tmp_path / "out"), *extra])


@pytest.fixture
def prepared(tmp_path):
    assert run(tmp_path, "expert", SMALL) == 0
    assert run(tmp_path, "demos", SMALL) == 0
    return tmp_path


def test_expert_gridworld_is_exact(prepared):
    score = json.loads((prepared / "out" / "expert_score.json").read_text())
    assert score["expert_mean"] == pytest.approx(0.99**8, abs=1e-12)
    assert score["episodes"] == 50


def test_expert_is_deterministic(tmp_path):
    for d in ("a", "b"):
        cli.main(["expert", "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "expert.json").read_bytes() == (tmp_path / "b" / "expert.json").read_bytes()


def test_demos_file(prepared):
    path = prepared / "out" / "demos_gridworld_3.jsonl"
    assert len(path.read_text().splitlines()) == 3
    assert len(read_demos(path, "gridworld").trajectories) == 3


def test_demos_env_mismatch(prepared):
    cfg = {**SMALL, "env_id": "cartpole_lite",
           "checkpoint": str(prepared / "out" / "expert.json")}
    assert run(prepared, "demos", cfg) == cli.EXIT_CONFIG


def test_train_fgail_outputs_and_determinism(prepared):
    assert run(prepared, "train", SMALL) == 0
    assert run(prepared, "train", SMALL) == 0
    runs = sorted(p for p in (prepared / "out").iterdir() if p.is_dir())
    assert len(runs) == 2 and runs[1].name == runs[0].name + ".1"  # never overwritten
    for name in ("model.json", "epochs.csv", "stats.csv", "density.csv", "fstar_curve.csv",
                 "manifest.json"):
        assert (runs[0] / name).exists()
    header, rows = read_csv(runs[0] / "fstar_curve.csv")
    assert min(float(r[2]) for r in rows) >= -1e-3
    for name in ("stats.csv", "fstar_curve.csv"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
    manifest = json.loads((runs[0] / "manifest.json").read_text())
    assert manifest["seed"] == 0 and "git_describe" in manifest and manifest["epochs_completed"] == 2


def test_train_bc_has_no_discriminator_csvs(prepared):
    assert run(prepared, "train", {**SMALL, "algorithm": "bc"}) == 0
    (rundir,) = [p for p in (prepared / "out").iterdir() if p.is_dir()]
    assert (rundir / "model.json").exists()
    for name in ("stats.csv", "fstar_curve.csv", "density.csv", "epochs.csv"):
        assert not (rundir / name).exists()


def test_eval_and_export(prepared):
    assert run(prepared, "train", SMALL) == 0
    (rundir,) = [p for p in (prepared / "out").iterdir() if p.is_dir()]
    cfg = {**SMALL, "checkpoint": str(rundir / "model.json")}
    assert run(prepared, "eval", cfg) == 0
    doc = json.loads((prepared / "out" / "eval.json").read_text())
    assert "normalized_return" in doc
    assert run(prepared, "export-fstar", cfg) == 0
    assert (prepared / "out" / "fstar_curve.csv").exists()


def test_seed_override(prepared):
    assert run(prepared, "train", SMALL, "--seed", "5") == 0
    (rundir,) = [p for p in (prepared / "out").iterdir() if p.is_dir()]
    assert rundir.name.endswith("-s5")


def test_divbench_discrete_identical(tmp_path):
    cfg = {"divbench": {"specs": ["KL", "RKL"], "distribution": "discrete",
                        "P": [0.2, 0.3, 0.5], "Q": [0.2, 0.3, 0.5], "sample_counts": [2000],
                        "steps": 100}}
    assert run(tmp_path, "divbench", cfg) == 0
    header, rows = read_csv(tmp_path / "out" / "divbench.csv")
    assert header == ["spec", "n_samples", "estimate", "oracle", "gap_to_oracle"]
    for r in rows:
        assert float(r[3]) == 0.0 and float(r[2]) <= 0.05


def test_exit_codes(tmp_path):
    assert run(tmp_path, "train", {"env_id": "mujoco"}) == cli.EXIT_CONFIG
    assert run(tmp_path, "train", {**SMALL, "epochs": 0}) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["expert", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert run(tmp_path, "train", SMALL) == cli.EXIT_IO  # no demo file yet
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["expert", "--out", str(blocker / "sub")]) == cli.EXIT_IO


def test_numeric_error_exit_code(prepared, monkeypatch):
    from fgail.errors import NumericError

    def boom(*a, **k):
        raise NumericError("synthetic")
    monkeypatch.setattr(cli, "train", boom)
    assert run(prepared, "train", SMALL) == cli.EXIT_NUMERIC


def test_failed_training_writes_error_summary(prepared, monkeypatch):
    from fgail import trainer
    from fgail.errors import NumericError
    real = trainer.imitation_rewards
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericError("synthetic failure")
        return real(*a, **k)
    monkeypatch.setattr(trainer, "imitation_rewards", flaky)
    assert run(prepared, "train", SMALL) == cli.EXIT_NUMERIC
    (rundir,) = [p for p in (prepared / "out").iterdir() if p.is_dir()]
    err = json.loads((rundir / "error.json").read_text())
    assert err["epochs_completed"] == 1
    assert len(read_csv(rundir / "epochs.csv")[1]) == 1


def test_log_level_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FDIV_LOG", "loud")
    assert cli.main(["expert", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
