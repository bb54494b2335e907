import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from cord.cli import main as cli_main
from cord.config import ExperimentConfig, echo_config, load_config, run_root
from cord.runner import (
    TrainingRun,
    build_learner,
    eval_unseen_agents,
    eval_unseen_teams,
    load_checkpoint,
    run_training,
    save_checkpoint,
)

TINY = dict(
    total_steps=300,
    eval_every=150,
    checkpoint_every=0,
    epsilon_anneal_steps=200,
    eval_episodes=2,
)


def tiny_cfg(**overrides):
    merged = {**TINY, **overrides}
    return ExperimentConfig(**merged)


class TestConfig:
    def test_file_parsing_and_overrides(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(
            "# comment\nmethod = cord_no_i\nlambda_c = 0.01\n"
            "train_team_sizes = 2,3\nrole_grad = off\n"
        )
        cfg = load_config(path, {"seed": 7})
        assert cfg.method == "cord_no_i"
        assert cfg.lambda_c == 0.01
        assert cfg.train_team_sizes == [2, 3]
        assert cfg.role_grad is False
        assert cfg.seed == 7

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("not_a_field = 3\n")
        with pytest.raises(ValueError):
            load_config(path)
        with pytest.raises(ValueError):
            load_config(None, {"nope": 1})

    def test_invalid_method_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(method="qmix")

    def test_echo_round_trip(self, tmp_path):
        cfg = tiny_cfg(method="maxent", seed=3, lambda_c=0.25)
        path = tmp_path / "echo.cfg"
        echo_config(cfg, path)
        again = load_config(path)
        assert again == cfg

    def test_ablation_lambda_wiring(self):
        assert tiny_cfg(method="cord").effective_lambda_c == 0.001
        assert tiny_cfg(method="cord_no_i").effective_lambda_c == 0.0
        assert tiny_cfg(method="cord_no_i").effective_lambda_d == 0.0
        assert tiny_cfg(method="maxent").role_mode == "uniform"
        assert tiny_cfg(method="cord").role_mode == "learned"

    def test_epsilon_schedule(self):
        cfg = ExperimentConfig(epsilon_anneal_steps=50_000)
        assert cfg.epsilon_at(0) == 1.0
        assert cfg.epsilon_at(25_000) == pytest.approx(0.525)
        assert cfg.epsilon_at(50_000) == pytest.approx(0.05)
        assert cfg.epsilon_at(500_000) == pytest.approx(0.05)

    def test_run_root_env_override(self, monkeypatch):
        monkeypatch.delenv("CORD_RUN_DIR", raising=False)
        assert run_root() == Path("runs")
        monkeypatch.setenv("CORD_RUN_DIR", "/tmp/elsewhere")
        assert run_root() == Path("/tmp/elsewhere")


class TestTrainingRun:
    def test_artifacts_written(self, tmp_path):
        run_dir = run_training(tiny_cfg(seed=0), tmp_path / "run")
        assert (run_dir / "config.txt").exists()
        assert (run_dir / "metrics.jsonl").exists()
        assert (run_dir / "checkpoint.pt").exists()
        assert (run_dir / "DONE").exists()
        records = [
            json.loads(line)
            for line in (run_dir / "metrics.jsonl").read_text().splitlines()
        ]
        assert records
        for rec in records:
            assert {"step", "episode", "return", "r_c", "r_d", "loss",
                    "epsilon"} <= set(rec)

    def test_completed_run_reused(self, tmp_path):
        cfg = tiny_cfg(seed=1)
        run_dir = run_training(cfg, tmp_path / "run")
        stamp = (run_dir / "checkpoint.pt").stat().st_mtime_ns
        run_training(cfg, run_dir)  # must be a no-op
        assert (run_dir / "checkpoint.pt").stat().st_mtime_ns == stamp

    def test_checkpoint_sections(self, tmp_path):
        cfg = tiny_cfg(seed=2)
        run_dir = run_training(cfg, tmp_path / "run")
        payload = load_checkpoint(run_dir / "checkpoint.pt")
        assert payload["version"] == 1
        assert {"controller", "utility", "mixing", "targets", "optimizer",
                "counters", "rng", "config"} <= set(payload)
        assert {"utility", "mixing"} == set(payload["targets"])
        assert payload["counters"]["env_steps"] >= cfg.total_steps

    def test_ablation_variants_share_initialization(self, tmp_path):
        _, learner_a = build_learner(tiny_cfg(method="cord", seed=5))
        _, learner_b = build_learner(tiny_cfg(method="cord_no_i", seed=5))
        _, learner_c = build_learner(tiny_cfg(method="maxent", seed=5))
        for a, b, c in zip(
            learner_a.controller.state_dict().values(),
            learner_b.controller.state_dict().values(),
            learner_c.controller.state_dict().values(),
        ):
            assert torch.equal(a, b) and torch.equal(a, c)
        for a, b in zip(
            learner_a.utility.state_dict().values(),
            learner_b.utility.state_dict().values(),
        ):
            assert torch.equal(a, b)
        assert learner_a.lambda_c == 0.001 and learner_b.lambda_c == 0.0

    def test_checkpoint_diff_at_step_zero(self, tmp_path):
        # identical parameter sections; only the stored lambdas differ
        paths = {}
        for method in ("cord", "cord_no_i"):
            cfg = tiny_cfg(method=method, seed=9)
            run = TrainingRun(cfg, tmp_path / method)
            paths[method] = run.save()
        a = load_checkpoint(paths["cord"])
        b = load_checkpoint(paths["cord_no_i"])
        for section in ("controller", "utility", "mixing"):
            for ka, kb in zip(a[section].values(), b[section].values()):
                assert torch.equal(ka, kb)
        assert a["config"]["method"] == "cord"
        assert b["config"]["method"] == "cord_no_i"

    def test_resume_reproduces_rng_stream(self, tmp_path):
        cfg = tiny_cfg(seed=11, total_steps=10**9)
        straight = TrainingRun(cfg, tmp_path / "straight")
        straight.train(max_episodes=4, quiet=True)

        first = TrainingRun(cfg, tmp_path / "split")
        first.train(max_episodes=2, quiet=True)
        ckpt = first.save()

        second = TrainingRun(cfg, tmp_path / "split2")
        second.resume(ckpt)
        assert second.episodes == 2
        second.train(max_episodes=4, quiet=True)

        assert second.env_steps == straight.env_steps
        assert second.episodes == straight.episodes
        a, b = straight.rng_states(), second.rng_states()
        assert a["team"] == b["team"]
        assert a["episode_seeds"] == b["episode_seeds"]
        assert a["actions"] == b["actions"]
        assert a["sampling"] == b["sampling"]
        assert torch.equal(a["rollout_roles"], b["rollout_roles"])
        assert torch.equal(a["train_noise"], b["train_noise"])
        assert (
            second.learner.last_target_update_episode
            == straight.learner.last_target_update_episode
        )

    def test_replay_log_bit_identical(self, tmp_path):
        logs = []
        for name in ("a", "b"):
            cfg = tiny_cfg(seed=13, replay_log=True)
            run_dir = run_training(cfg, tmp_path / name)
            logs.append((run_dir / "replay.jsonl").read_bytes())
        assert logs[0] == logs[1]
        record = json.loads(logs[0].splitlines()[0])
        assert {"episode", "t", "state", "actions", "r_e", "r_c", "r_d"} == set(
            record
        )

    def test_method_variants_train(self, tmp_path):
        for method in ("cord", "cord_no_i", "maxent"):
            run_dir = run_training(
                tiny_cfg(method=method, seed=3, total_steps=150),
                tmp_path / method,
            )
            assert (run_dir / "DONE").exists()


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ckpt")
    run_dir = run_training(tiny_cfg(seed=4, total_steps=150), tmp / "run")
    return run_dir / "checkpoint.pt"


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("plots")
    dirs = []
    for method, seed in (("cord", 0), ("cord", 1), ("maxent", 0)):
        cfg = tiny_cfg(method=method, seed=seed, total_steps=150)
        dirs.append(run_training(cfg, tmp / f"{method}_{seed}"))
    return dirs


class TestEvaluationProtocols:
    def test_unseen_teams_reports_and_reproduces(self, checkpoint):
        a = eval_unseen_teams(checkpoint, team_sizes=(5, 6), episodes=2)
        b = eval_unseen_teams(checkpoint, team_sizes=(5, 6), episodes=2)
        assert a == b
        for size in (5, 6):
            assert a[size]["episodes"] == 2
            assert np.isfinite(a[size]["mean"])

    def test_unseen_teams_size_limit(self, checkpoint):
        with pytest.raises(ValueError):
            eval_unseen_teams(checkpoint, team_sizes=(9,), episodes=1)

    def test_unseen_agents_protocol_counts(self, checkpoint):
        res = eval_unseen_agents(checkpoint, team_size=5, episodes=2)
        assert res["controlled_counts"] == [1, 2, 3, 4]
        assert res["total_episodes"] == 8
        res6 = eval_unseen_agents(checkpoint, team_size=6, episodes=2)
        assert res6["controlled_counts"] == [1, 2, 3, 4, 5]
        assert res6["total_episodes"] == 10

    def test_unseen_agents_average_over_counts(self, checkpoint):
        res = eval_unseen_agents(checkpoint, team_size=5, episodes=2)
        means = [res["per_count"][c]["mean"] for c in res["controlled_counts"]]
        assert res["mean"] == pytest.approx(float(np.mean(means)))

    def test_invalid_controlled_count(self, checkpoint):
        with pytest.raises(ValueError):
            eval_unseen_agents(
                checkpoint, team_size=5, controlled_counts=(5,), episodes=1
            )

    def test_evaluation_writes_nothing(self, checkpoint, tmp_path):
        run_dir = checkpoint.parent
        before = sorted(p.name for p in run_dir.iterdir())
        eval_unseen_teams(checkpoint, team_sizes=(5,), episodes=1)
        after = sorted(p.name for p in run_dir.iterdir())
        assert before == after


class TestPlots:
    def test_emit_plots_and_csv(self, run_dirs, tmp_path):
        from cord.plotting import emit_plots, read_summary_csv

        written = emit_plots(run_dirs, tmp_path / "out")
        names = {p.name for p in written}
        assert "summary.csv" in names
        assert "learning_curves.png" in names
        rows = read_summary_csv(tmp_path / "out" / "summary.csv")
        assert {r["method"] for r in rows} == {"cord", "maxent"}
        assert set(rows[0]) == {"step", "method", "seed", "return", "r_c", "r_d"}

    def test_plots_deterministic(self, run_dirs, tmp_path):
        from cord.plotting import emit_plots

        emit_plots(run_dirs, tmp_path / "one")
        emit_plots(run_dirs, tmp_path / "two")
        a = (tmp_path / "one" / "learning_curves.png").read_bytes()
        b = (tmp_path / "two" / "learning_curves.png").read_bytes()
        assert a == b
        csv_a = (tmp_path / "one" / "summary.csv").read_bytes()
        csv_b = (tmp_path / "two" / "summary.csv").read_bytes()
        assert csv_a == csv_b

    def test_generalization_bars_from_eval_payloads(self, run_dirs, tmp_path):
        from cord.plotting import emit_plots

        for k, run_dir in enumerate(run_dirs):
            payload = {
                "method": "cord" if k < 2 else "maxent",
                "results": {
                    "5-agent": {"mean": 10.0 + k, "std": 1.0, "episodes": 2},
                    "6-agent": {"mean": 12.0 + k, "std": 1.5, "episodes": 2},
                },
            }
            (Path(run_dir) / "eval_teams.json").write_text(json.dumps(payload))
        written = emit_plots(run_dirs, tmp_path / "bars")
        assert any(p.name == "unseen_teams.png" for p in written)


class TestCli:
    def test_train_and_eval_verbs(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CORD_RUN_DIR", str(tmp_path))
        rc = cli_main(
            [
                "train", "--method", "cord", "--seed", "0",
                "--total-steps", "150", "--eval-every", "150",
                "--checkpoint-every", "0", "--eval-episodes", "1",
                "--quiet",
            ]
        )
        assert rc == 0
        run_dir = tmp_path / "cord_seed0"
        assert (run_dir / "DONE").exists()

        out_file = tmp_path / "teams.json"
        rc = cli_main(
            [
                "eval-teams", "--checkpoint", str(run_dir / "checkpoint.pt"),
                "--team-sizes", "5", "--episodes", "1",
                "--out", str(out_file),
            ]
        )
        assert rc == 0
        payload = json.loads(out_file.read_text())
        assert payload["method"] == "cord"
        assert "5-agent" in payload["results"]

        rc = cli_main(
            [
                "eval-agents", "--checkpoint", str(run_dir / "checkpoint.pt"),
                "--team-sizes", "5", "--episodes", "1",
                "--controlled-counts", "1,2",
                "--out", str(tmp_path / "agents.json"),
            ]
        )
        assert rc == 0
        payload = json.loads((tmp_path / "agents.json").read_text())
        assert payload["results"]["5-agent"]["episodes"] == 2

        rc = cli_main(
            ["plot", str(run_dir), "--out-dir", str(tmp_path / "plots")]
        )
        assert rc == 0
        assert (tmp_path / "plots" / "summary.csv").exists()

    def test_config_file_flag(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CORD_RUN_DIR", str(tmp_path))
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text(
            "method = maxent\ntotal_steps = 150\neval_every = 150\n"
            "checkpoint_every = 0\n"
        )
        rc = cli_main(["train", "--config", str(cfg_file), "--seed", "2",
                       "--quiet"])
        assert rc == 0
        echoed = (tmp_path / "maxent_seed2" / "config.txt").read_text()
        assert "method = maxent" in echoed
        assert "seed = 2" in echoed
