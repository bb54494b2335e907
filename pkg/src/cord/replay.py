"""Episode storage: recorder, padded batches, and the FIFO replay buffer.

Episodes are stored whole. A batch stacks episodes padded to the longest
length with a validity mask; padded steps contribute zero loss. The
buffer samples uniformly with replacement until a requested number of
valid steps is covered.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class EpisodeBatch:
    """Stacked episodes; observation-indexed arrays carry T+1 steps."""

    features: np.ndarray      # [B, T+1, E, F] float32
    obs_mask: np.ndarray      # [B, T+1, N, E] bool
    team_mask: np.ndarray     # [B, T+1, E] bool
    agent_mask: np.ndarray    # [B, N] bool
    avail: np.ndarray         # [B, T+1, N, A] bool
    last_actions: np.ndarray  # [B, T+1, N, A] float32
    last_roles: np.ndarray    # [B, T+1, N, d] float32 (roles in effect at t-1)
    roles: np.ndarray         # [B, T+1, N, d] float32 (roles in effect at t)
    actions: np.ndarray       # [B, T, N] int64
    reward: np.ndarray        # [B, T] float32
    terminated: np.ndarray    # [B, T] bool
    filled: np.ndarray        # [B, T] bool

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]

    @property
    def max_steps(self) -> int:
        return self.actions.shape[1]

    def validate(self) -> None:
        b, t = self.reward.shape
        if self.actions.shape[:2] != (b, t) or self.filled.shape != (b, t):
            raise ValueError("per-step arrays disagree on batch/length")
        if self.features.shape[1] != t + 1:
            raise ValueError("observation arrays must carry T+1 steps")
        if not np.isfinite(self.reward[self.filled]).all():
            raise ValueError("non-finite reward in valid steps")
        if (self.reward[~self.filled] != 0).any():
            raise ValueError("padded steps must carry zero reward")
        # terminal flags only at the last valid step of each episode
        for ep in range(b):
            valid = np.flatnonzero(self.filled[ep])
            if valid.size == 0:
                raise ValueError("episode with no valid steps")
            term = np.flatnonzero(self.terminated[ep])
            if term.size and (term[0] != valid[-1] or term.size > 1):
                raise ValueError("terminal flag not at episode end")


class EpisodeRecorder:
    """Accumulates one episode, then emits the per-episode array dict."""

    def __init__(self):
        self._obs_steps = []   # dicts from observations
        self._act_steps = []   # dicts from transitions

    def record_obs(self, obs, roles: np.ndarray) -> None:
        self._obs_steps.append(
            {
                "features": obs.entity_features,
                "obs_mask": obs.obs_mask,
                "team_mask": obs.team_mask,
                "avail": obs.avail_actions,
                "last_actions": obs.last_actions,
                "last_roles": obs.last_roles,
                "roles": roles.astype(np.float32, copy=True),
            }
        )

    def record_transition(self, actions, reward, terminated) -> None:
        self._act_steps.append(
            {
                "actions": np.asarray(actions, dtype=np.int64),
                "reward": np.float32(reward),
                "terminated": bool(terminated),
            }
        )

    def finish(self, agent_mask: np.ndarray) -> dict:
        if len(self._obs_steps) != len(self._act_steps) + 1:
            raise ValueError("need exactly one more observation than transitions")
        ep = {
            key: np.stack([s[key] for s in self._obs_steps])
            for key in self._obs_steps[0]
        }
        ep["actions"] = np.stack([s["actions"] for s in self._act_steps])
        ep["reward"] = np.array([s["reward"] for s in self._act_steps], np.float32)
        ep["terminated"] = np.array(
            [s["terminated"] for s in self._act_steps], dtype=bool
        )
        ep["agent_mask"] = agent_mask.copy()
        return ep


class ReplayBuffer:
    """Episode-level FIFO buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int):
        self._episodes = deque(maxlen=capacity)
        self.capacity = capacity

    def __len__(self) -> int:
        return len(self._episodes)

    def add(self, episode: dict) -> None:
        self._episodes.append(episode)

    def can_sample(self) -> bool:
        return len(self._episodes) > 0

    def _uniform_index(self, rng: np.random.Generator) -> int:
        # full-width draw keeps RNG consumption independent of the buffer
        # size, so a resumed run replays the same stream; the modulo bias
        # is ~len/2^32 and irrelevant at this capacity
        return int(rng.integers(0, 2**32)) % len(self._episodes)

    def sample(self, rng: np.random.Generator, min_steps: int) -> EpisodeBatch:
        """Draw whole episodes until at least min_steps valid steps."""
        if not self._episodes:
            raise ValueError("cannot sample from an empty replay buffer")
        chosen, steps = [], 0
        while steps < min_steps:
            ep = self._episodes[self._uniform_index(rng)]
            chosen.append(ep)
            steps += ep["actions"].shape[0]
        return stack_episodes(chosen)


def stack_episodes(episodes: list[dict]) -> EpisodeBatch:
    """Pad episodes to a common length and stack into one batch."""
    max_t = max(ep["actions"].shape[0] for ep in episodes)

    def padded(key, steps):
        arrs = []
        for ep in episodes:
            a = ep[key]
            pad = steps - a.shape[0]
            if pad > 0:
                a = np.concatenate(
                    [a, np.zeros((pad,) + a.shape[1:], dtype=a.dtype)]
                )
            arrs.append(a)
        return np.stack(arrs)

    return EpisodeBatch(
        features=padded("features", max_t + 1),
        obs_mask=padded("obs_mask", max_t + 1),
        team_mask=padded("team_mask", max_t + 1),
        agent_mask=np.stack([ep["agent_mask"] for ep in episodes]),
        avail=padded("avail", max_t + 1),
        last_actions=padded("last_actions", max_t + 1),
        last_roles=padded("last_roles", max_t + 1),
        roles=padded("roles", max_t + 1),
        actions=padded("actions", max_t),
        reward=padded("reward", max_t),
        terminated=padded("terminated", max_t),
        filled=np.stack(
            [
                np.arange(max_t) < ep["actions"].shape[0]
                for ep in episodes
            ]
        ),
    )
