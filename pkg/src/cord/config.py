"""Experiment configuration: typed fields, flat key-value config files,
and a full echo of the resolved configuration into each run directory.

File format: one `key = value` per line, `#` comments; lists are
comma-separated. CLI flags override file values which override defaults.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

METHODS = ("cord", "cord_no_i", "maxent")


@dataclass
class ExperimentConfig:
    method: str = "cord"
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train_team_sizes: list[int] = field(default_factory=lambda: [2, 3, 4])
    lambda_c: float = 0.001
    lambda_d: float = 0.001
    # per-step cap on the agent-summed causal KL entering the shaped
    # reward; the do-baseline KL is unbounded above and can spike once the
    # log-std head saturates, which would poison the TD targets
    r_c_clip: float = 50.0
    total_steps: int = 300_000
    eval_every: int = 5_000
    checkpoint_every: int = 50_000
    t_role: int = 5
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 50_000
    buffer_capacity: int = 5_000
    batch_size_steps: int = 256
    updates_per_episode: int = 4
    target_period: int = 200  # target hard update, in training episodes
    lr: float = 3e-4
    grad_clip: float = 10.0
    d_role: int = 8
    embed_dim: int = 128
    n_heads: int = 4
    utility_hidden: int = 64
    mixer_embed: int = 32
    mixer_hyper: int = 64
    role_grad: bool = True
    replay_log: bool = False
    eval_episodes: int = 32
    run_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("lambda_c", "lambda_d", "lr", "gamma", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ValueError("epsilon schedule must satisfy 0 <= end <= start <= 1")
        if any(n < 1 for n in self.train_team_sizes):
            raise ValueError("team sizes must be positive")

    @property
    def effective_lambda_c(self) -> float:
        return 0.0 if self.method in ("cord_no_i", "maxent") else self.lambda_c

    @property
    def effective_lambda_d(self) -> float:
        return 0.0 if self.method in ("cord_no_i", "maxent") else self.lambda_d

    @property
    def role_mode(self) -> str:
        return "uniform" if self.method == "maxent" else "learned"

    def epsilon_at(self, env_steps: int) -> float:
        frac = min(env_steps / max(self.epsilon_anneal_steps, 1), 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def _parse_value(name: str, raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean {name}={raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return [int(s) for s in items]
    return raw


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    valid = {f.name for f in fields(cfg)}
    updates: dict = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in valid:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            updates[key] = _parse_value(key, raw, getattr(cfg, key))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in valid:
            raise ValueError(f"unknown config override {key!r}")
        if isinstance(value, str):
            value = _parse_value(key, value, getattr(cfg, key))
        updates[key] = value
    for key, value in updates.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def echo_config(cfg: ExperimentConfig, path: str | Path) -> None:
    """Write the fully resolved configuration as a flat key-value file."""
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def run_root(default: str = "runs") -> Path:
    """Output root; the CORD_RUN_DIR environment variable overrides it."""
    return Path(os.environ.get("CORD_RUN_DIR", default))
