"""Experiment orchestration: rollouts, training runs, evaluation
protocols for unseen teams and unseen agents, checkpoints, metrics, and
episode-replay logs.

A training run owns one environment and one learner; every episode
samples a team size from the configured training sizes. Checkpoints are
a single versioned file with named parameter sections and all RNG
states so an interrupted run resumes with an identical random stream.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import rolemath
from .config import ExperimentConfig, echo_config
from .controller import RoleController, sample_roles, team_batch
from .env import MAX_AGENTS, ResourceCollectionEnv, TeamSpec, builtin_action
from .learner import AttentionMixer, Learner, UtilityNet
from .replay import EpisodeRecorder, ReplayBuffer
from .rng import child_seed, numpy_rng, torch_generator

CHECKPOINT_VERSION = 1


@dataclass
class EpisodeStats:
    steps: int
    env_return: float
    deposits: int
    intercepts: int
    breaches: int


class ReplayLogWriter:
    """JSON-lines episode-replay log; one record per environment step."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


def state_hash(state) -> str:
    return hashlib.sha1(repr(state.canonical()).encode()).hexdigest()


def build_learner(cfg: ExperimentConfig) -> tuple[ResourceCollectionEnv, Learner]:
    """Construct environment and learner; initialization depends only on
    the seed and the architecture, never on the method, so ablation
    variants share identical initial parameters."""
    torch.manual_seed(child_seed(cfg.seed, "init"))
    env = ResourceCollectionEnv(d_role=cfg.d_role)
    controller = RoleController(
        feat_dim=env.feat_dim,
        n_actions=env.n_actions,
        d_role=cfg.d_role,
        embed_dim=cfg.embed_dim,
        n_heads=cfg.n_heads,
    )
    utility = UtilityNet(
        feat_dim=env.feat_dim,
        n_actions=env.n_actions,
        d_role=cfg.d_role,
        hidden_dim=cfg.utility_hidden,
    )
    mixer = AttentionMixer(
        feat_dim=env.feat_dim,
        embed_dim=cfg.mixer_embed,
        hyper_dim=cfg.mixer_hyper,
        n_heads=cfg.n_heads,
    )
    learner = Learner(
        controller,
        utility,
        mixer,
        gamma=cfg.gamma,
        lr=cfg.lr,
        grad_clip=cfg.grad_clip,
        lambda_c=cfg.effective_lambda_c,
        lambda_d=cfg.effective_lambda_d,
        r_c_clip=cfg.r_c_clip,
        t_role=cfg.t_role,
        role_grad=cfg.role_grad,
        role_mode=cfg.role_mode,
        target_period=cfg.target_period,
        seed=child_seed(cfg.seed, "train-noise"),
    )
    return env, learner


class Rollout:
    """Plays episodes with the current networks; optionally records them
    for replay, writes step-level logs, and checks attention invariants."""

    def __init__(self, env, learner: Learner, cfg: ExperimentConfig, *,
                 act_rng: np.random.Generator, role_gen: torch.Generator):
        self.env = env
        self.learner = learner
        self.cfg = cfg
        self.act_rng = act_rng
        self.role_gen = role_gen

    def _assign_roles(self, obs, n: int, mode: str, check: bool):
        """Sample roles for every existing agent; returns (roles np, r_intr)."""
        cfg = self.cfg
        if cfg.role_mode == "uniform":
            roles = np.zeros((MAX_AGENTS, cfg.d_role), dtype=np.float32)
            draw = (
                torch.rand((n, cfg.d_role), generator=self.role_gen) * 2.0 - 1.0
            )
            roles[:n] = draw.numpy()
            return roles, None
        with torch.no_grad():
            out = self.learner.controller(team_batch([obs]), check=check)
            mode_t = "mean" if mode == "mean" else "stochastic"
            sampled = sample_roles(out.posterior, mode_t, self.role_gen)[0]
        roles = np.zeros((MAX_AGENTS, cfg.d_role), dtype=np.float32)
        roles[:n] = sampled[:n].numpy()
        return roles, out

    def _step_intrinsics(self, obs, check: bool) -> tuple[float, float]:
        """Collection-time intrinsic rewards for the replay log; the causal
        term carries the same cap the learner applies when shaping."""
        if self.cfg.role_mode == "uniform":
            return 0.0, 0.0
        with torch.no_grad():
            out = self.learner.controller(team_batch([obs]), check=check)
            amask = torch.as_tensor(obs.agent_mask)[None]
            kl = rolemath.gaussian_kl(out.posterior, out.baseline)
            r_c = min(float((kl * amask).sum()), self.learner.r_c_clip)
            aff = rolemath.affinity_matrix(out.posterior, agent_mask=amask)
            r_d = float(rolemath.diversity_reward(aff)[0])
        return r_c, r_d

    def play(
        self,
        spec: TeamSpec,
        *,
        epsilon: float,
        role_sampling: str = "stochastic",
        record: bool = False,
        replay_writer: ReplayLogWriter | None = None,
        episode_index: int = 0,
        check_invariants: bool = False,
    ) -> tuple[dict | None, EpisodeStats]:
        env, cfg, learner = self.env, self.cfg, self.learner
        obs = env.reset(spec)
        n = spec.n_agents
        controlled = spec.controlled
        recorder = EpisodeRecorder() if record else None
        hidden = learner.utility.init_hidden(1, MAX_AGENTS)
        roles = np.zeros((MAX_AGENTS, cfg.d_role), dtype=np.float32)
        env_return = 0.0
        deposits = intercepts = breaches = 0

        for t in range(env.episode_limit):
            if t % cfg.t_role == 0:
                roles, _ = self._assign_roles(obs, n, role_sampling, check_invariants)
                env.set_roles(roles)
            if replay_writer is not None:
                r_c, r_d = self._step_intrinsics(obs, check_invariants)
                pre_hash = state_hash(env.state)
            if recorder is not None:
                recorder.record_obs(obs, roles)

            with torch.no_grad():
                x = learner.utility.embed_inputs(
                    torch.as_tensor(obs.entity_features)[None],
                    torch.as_tensor(obs.obs_mask)[None],
                    torch.as_tensor(obs.last_actions)[None],
                    torch.as_tensor(roles)[None],
                )
                q, hidden = learner.utility(x, hidden)
            joint = np.zeros(n, dtype=np.int64)
            if controlled:
                picked = learner.select_actions(
                    q[0, : n], obs.avail_actions[:n], epsilon, self.act_rng
                )
                for i in controlled:
                    joint[i] = picked[i]
            for i in spec.builtin:
                joint[i] = builtin_action(env.state, i, spec.builtin_policy)

            obs, reward, done, info = env.step(joint)
            env_return += reward
            deposits += info["deposits"]
            intercepts += info["intercepts"]
            breaches += info["breaches"]

            if replay_writer is not None:
                replay_writer.write(
                    {
                        "episode": episode_index,
                        "t": t,
                        "state": pre_hash,
                        "actions": joint.tolist(),
                        "r_e": float(reward),
                        "r_c": r_c,
                        "r_d": r_d,
                    }
                )
            if recorder is not None:
                padded = np.zeros(MAX_AGENTS, dtype=np.int64)
                padded[:n] = joint
                recorder.record_transition(padded, reward, done)
            if done:
                break

        episode = None
        if recorder is not None:
            recorder.record_obs(obs, roles)
            mask = np.zeros(MAX_AGENTS, dtype=bool)
            mask[:n] = True
            episode = recorder.finish(mask)
        stats = EpisodeStats(
            steps=env.state.step_count,
            env_return=env_return,
            deposits=deposits,
            intercepts=intercepts,
            breaches=breaches,
        )
        return episode, stats


# ---- checkpointing -------------------------------------------------------


def checkpoint_payload(learner: Learner, cfg: ExperimentConfig, counters: dict,
                       rng_states: dict) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "controller": learner.controller.state_dict(),
        "utility": learner.utility.state_dict(),
        "mixing": learner.mixer.state_dict(),
        "targets": {
            "utility": learner.target_utility.state_dict(),
            "mixing": learner.target_mixer.state_dict(),
        },
        "optimizer": learner.opt.state_dict(),
        "counters": dict(counters),
        "rng": rng_states,
    }


def save_checkpoint(path: str | Path, learner, cfg, counters, rng_states) -> None:
    torch.save(checkpoint_payload(learner, cfg, counters, rng_states), path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def restore_learner(payload: dict) -> tuple[ExperimentConfig, ResourceCollectionEnv, Learner]:
    cfg = ExperimentConfig(**payload["config"])
    env, learner = build_learner(cfg)
    learner.controller.load_state_dict(payload["controller"])
    learner.utility.load_state_dict(payload["utility"])
    learner.mixer.load_state_dict(payload["mixing"])
    learner.target_utility.load_state_dict(payload["targets"]["utility"])
    learner.target_mixer.load_state_dict(payload["targets"]["mixing"])
    learner.opt.load_state_dict(payload["optimizer"])
    counters = payload["counters"]
    learner.train_steps = counters["train_steps"]
    learner.episodes_seen = counters["episodes"]
    learner.last_target_update_episode = counters["last_target_update_episode"]
    return cfg, env, learner


# ---- training -------------------------------------------------------------


class TrainingRun:
    """One (method, seed) training process writing into its run directory."""

    def __init__(self, cfg: ExperimentConfig, run_dir: str | Path):
        torch.set_num_threads(1)
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.env, self.learner = build_learner(cfg)
        seed = cfg.seed
        self.team_rng = numpy_rng(seed, "team-sizes")
        self.episode_seed_rng = numpy_rng(seed, "episode-seeds")
        self.act_rng = numpy_rng(seed, "actions")
        self.sample_rng = numpy_rng(seed, "replay-sampling")
        self.role_gen = torch_generator(seed, "rollout-roles")
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.env_steps = 0
        self.episodes = 0
        self.rollout = Rollout(
            self.env, self.learner, cfg,
            act_rng=self.act_rng, role_gen=self.role_gen,
        )
        self._recent_returns: deque = deque(maxlen=20)
        self._recent_stats: deque = deque(maxlen=20)

    # -- rng state round-trip --

    def rng_states(self) -> dict:
        return {
            "team": self.team_rng.bit_generator.state,
            "episode_seeds": self.episode_seed_rng.bit_generator.state,
            "actions": self.act_rng.bit_generator.state,
            "sampling": self.sample_rng.bit_generator.state,
            "rollout_roles": self.role_gen.get_state(),
            "train_noise": self.learner.noise_gen.get_state(),
        }

    def restore_rng(self, states: dict) -> None:
        self.team_rng.bit_generator.state = states["team"]
        self.episode_seed_rng.bit_generator.state = states["episode_seeds"]
        self.act_rng.bit_generator.state = states["actions"]
        self.sample_rng.bit_generator.state = states["sampling"]
        self.role_gen.set_state(states["rollout_roles"])
        self.learner.noise_gen.set_state(states["train_noise"])

    def counters(self) -> dict:
        return {
            "env_steps": self.env_steps,
            "episodes": self.episodes,
            "train_steps": self.learner.train_steps,
            "last_target_update_episode": self.learner.last_target_update_episode,
        }

    def save(self, name: str = "checkpoint.pt") -> Path:
        path = self.run_dir / name
        save_checkpoint(path, self.learner, self.cfg, self.counters(), self.rng_states())
        return path

    def resume(self, path: str | Path) -> None:
        payload = load_checkpoint(path)
        learner = self.learner
        learner.controller.load_state_dict(payload["controller"])
        learner.utility.load_state_dict(payload["utility"])
        learner.mixer.load_state_dict(payload["mixing"])
        learner.target_utility.load_state_dict(payload["targets"]["utility"])
        learner.target_mixer.load_state_dict(payload["targets"]["mixing"])
        learner.opt.load_state_dict(payload["optimizer"])
        counters = payload["counters"]
        self.env_steps = counters["env_steps"]
        self.episodes = counters["episodes"]
        learner.train_steps = counters["train_steps"]
        learner.episodes_seen = counters["episodes"]
        learner.last_target_update_episode = counters["last_target_update_episode"]
        self.restore_rng(payload["rng"])

    def train(self, *, max_episodes: int | None = None, quiet: bool = False) -> None:
        cfg = self.cfg
        echo_config(cfg, self.run_dir / "config.txt")
        metrics_path = self.run_dir / "metrics.jsonl"
        # fresh runs truncate; resumed runs append
        metrics_fh = open(metrics_path, "a" if self.env_steps > 0 else "w")
        replay_writer = None
        if cfg.replay_log:
            replay_writer = ReplayLogWriter(self.run_dir / "replay.jsonl")
        next_log = 0
        started = time.time()
        try:
            while self.env_steps < cfg.total_steps and (
                max_episodes is None or self.episodes < max_episodes
            ):
                n = int(self.team_rng.choice(cfg.train_team_sizes))
                spec = TeamSpec(
                    n_agents=n,
                    seed=int(self.episode_seed_rng.integers(2**31)),
                )
                epsilon = cfg.epsilon_at(self.env_steps)
                episode, stats = self.rollout.play(
                    spec,
                    epsilon=epsilon,
                    role_sampling="stochastic",
                    record=True,
                    replay_writer=replay_writer,
                    episode_index=self.episodes,
                )
                self.buffer.add(episode)
                self.env_steps += stats.steps
                self.episodes += 1
                self._recent_returns.append(stats.env_return)
                self.learner.note_episode()
                for _ in range(cfg.updates_per_episode):
                    if self.buffer.can_sample():
                        batch = self.buffer.sample(
                            self.sample_rng, cfg.batch_size_steps
                        )
                        self._recent_stats.append(self.learner.train_step(batch))
                if self.env_steps >= next_log:
                    rec = self._metrics_record(epsilon, started)
                    metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    metrics_fh.flush()
                    if not quiet:
                        print(
                            f"[{cfg.method} seed={cfg.seed}] step {rec['step']} "
                            f"return {rec['return']:.2f} loss {rec['loss']:.4f} "
                            f"r_c {rec['r_c']:.4f} r_d {rec['r_d']:.4f}"
                        )
                    next_log += cfg.eval_every
                if cfg.checkpoint_every and self.env_steps // cfg.checkpoint_every > (
                    self.env_steps - stats.steps
                ) // cfg.checkpoint_every:
                    self.save()
            self.save()
            (self.run_dir / "DONE").write_text("completed\n")
        finally:
            metrics_fh.close()
            if replay_writer is not None:
                replay_writer.close()

    def _metrics_record(self, epsilon: float, started: float) -> dict:
        mean = lambda key: (
            float(np.mean([s[key] for s in self._recent_stats]))
            if self._recent_stats
            else 0.0
        )
        return {
            "step": self.env_steps,
            "episode": self.episodes,
            "return": float(np.mean(self._recent_returns))
            if self._recent_returns
            else 0.0,
            "r_c": mean("r_c"),
            "r_d": mean("r_d"),
            "loss": mean("loss"),
            "epsilon": epsilon,
            "elapsed": round(time.time() - started, 3),
        }


def run_training(cfg: ExperimentConfig, run_dir: str | Path,
                 resume: bool = False, quiet: bool = False) -> Path:
    """Train one (method, seed) run; reuses a completed run directory."""
    run_dir = Path(run_dir)
    if (run_dir / "DONE").exists():
        return run_dir
    run = TrainingRun(cfg, run_dir)
    ckpt = run_dir / "checkpoint.pt"
    if resume and ckpt.exists():
        run.resume(ckpt)
    run.train(quiet=quiet)
    return run_dir


def _matrix_entry(job: tuple) -> str:
    cfg_dict, run_dir = job
    cfg = ExperimentConfig(**cfg_dict)
    run_training(cfg, run_dir, resume=True, quiet=True)
    return str(run_dir)


def run_matrix(
    base_cfg: ExperimentConfig,
    root: str | Path,
    methods: tuple[str, ...] = ("cord", "cord_no_i", "maxent"),
    seeds: tuple[int, ...] | None = None,
    workers: int = 2,
) -> dict[tuple[str, int], Path]:
    """Train every (method, seed) cell, in parallel processes.

    Completed run directories (DONE marker) are reused, so the matrix is
    resumable and idempotent.
    """
    import multiprocessing as mp
    from dataclasses import replace

    root = Path(root)
    seeds = tuple(seeds if seeds is not None else base_cfg.seeds)
    cells: dict[tuple[str, int], Path] = {}
    jobs = []
    for method in methods:
        for seed in seeds:
            cfg = replace(base_cfg, method=method, seed=seed)
            run_dir = root / f"{method}_seed{seed}"
            cells[(method, seed)] = run_dir
            if not (run_dir / "DONE").exists():
                jobs.append((asdict(cfg), run_dir))
    if jobs:
        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=max(1, workers)) as pool:
            for done in pool.imap_unordered(_matrix_entry, jobs):
                print(f"[matrix] completed {done}", flush=True)
    return cells


# ---- evaluation protocols ---------------------------------------------------


def _eval_rollout(env, learner, cfg) -> Rollout:
    return Rollout(
        env, learner, cfg,
        act_rng=numpy_rng(cfg.seed, "eval-actions"),
        role_gen=torch_generator(cfg.seed, "eval-roles"),
    )


def evaluate_policy(
    env,
    learner,
    cfg: ExperimentConfig,
    specs: list[TeamSpec],
) -> list[float]:
    """Greedy evaluation (epsilon 0, mean-mode roles); never writes replay."""
    rollout = _eval_rollout(env, learner, cfg)
    returns = []
    for spec in specs:
        _, stats = rollout.play(
            spec, epsilon=0.0, role_sampling="mean", record=False
        )
        returns.append(stats.env_return)
    return returns


def eval_unseen_teams(
    checkpoint: str | Path,
    team_sizes: tuple[int, ...] = (5, 6),
    episodes: int | None = None,
    eval_seed: int = 12345,
) -> dict:
    """Generalization to team sizes outside the training range."""
    cfg, env, learner = restore_learner(load_checkpoint(checkpoint))
    episodes = episodes or cfg.eval_episodes
    results = {}
    for size in team_sizes:
        if size > MAX_AGENTS:
            raise ValueError(f"team size {size} exceeds architecture padding")
        seed_rng = numpy_rng(eval_seed, "unseen-teams", size)
        specs = [
            TeamSpec(n_agents=size, seed=int(seed_rng.integers(2**31)))
            for _ in range(episodes)
        ]
        returns = evaluate_policy(env, learner, cfg, specs)
        results[size] = {
            "mean": float(np.mean(returns)),
            "std": float(np.std(returns)),
            "episodes": len(returns),
            "returns": returns,
        }
    return results


def eval_unseen_agents(
    checkpoint: str | Path,
    team_size: int,
    controlled_counts: tuple[int, ...] | None = None,
    episodes: int | None = None,
    builtin_policy: str = "mixed",
    eval_seed: int = 12345,
) -> dict:
    """Generalization to built-in teammates: for each controlled count the
    remaining slots run scripted policies; the reported score averages the
    per-count means."""
    cfg, env, learner = restore_learner(load_checkpoint(checkpoint))
    episodes = episodes or cfg.eval_episodes
    if controlled_counts is None:
        controlled_counts = tuple(range(1, team_size))
    per_count = {}
    for count in controlled_counts:
        if not 1 <= count < team_size:
            raise ValueError(f"controlled count {count} not in [1, {team_size - 1}]")
        seed_rng = numpy_rng(eval_seed, "unseen-agents", team_size, count)
        specs = [
            TeamSpec(
                n_agents=team_size,
                controlled_indices=tuple(range(count)),
                builtin_policy=builtin_policy,
                seed=int(seed_rng.integers(2**31)),
            )
            for _ in range(episodes)
        ]
        returns = evaluate_policy(env, learner, cfg, specs)
        per_count[count] = {
            "mean": float(np.mean(returns)),
            "std": float(np.std(returns)),
            "episodes": len(returns),
        }
    means = [per_count[c]["mean"] for c in controlled_counts]
    return {
        "team_size": team_size,
        "controlled_counts": list(controlled_counts),
        "mean": float(np.mean(means)),
        "std": float(np.std(means)),
        "per_count": per_count,
        "total_episodes": int(sum(per_count[c]["episodes"] for c in controlled_counts)),
    }
