import numpy as np
import pytest
import torch

from cord.env import MAX_AGENTS, ResourceCollectionEnv, TeamSpec
from cord.obs import EntityObservation
from cord.replay import EpisodeRecorder, stack_episodes


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def manual_obs(
    n_agents: int,
    max_agents: int = 4,
    n_extra: int = 3,
    n_actions: int = 5,
    d_role: int = 8,
    feat_dim: int = 10,
    seed: int = 0,
    full_visibility: bool = True,
) -> EntityObservation:
    """Hand-built team observation: agent rows first, then extra entities."""
    rng = np.random.default_rng(seed)
    n_entities = max_agents + n_extra
    feats = np.zeros((n_entities, feat_dim), dtype=np.float32)
    team_mask = np.zeros(n_entities, dtype=bool)
    team_mask[:n_agents] = True
    team_mask[max_agents:] = True
    feats[team_mask] = rng.normal(size=(team_mask.sum(), feat_dim)).astype(
        np.float32
    )
    obs_mask = np.zeros((max_agents, n_entities), dtype=bool)
    for i in range(n_agents):
        if full_visibility:
            obs_mask[i] = team_mask
        else:
            obs_mask[i] = team_mask & (rng.random(n_entities) < 0.7)
            obs_mask[i, i] = True
    last_actions = np.zeros((max_agents, n_actions), dtype=np.float32)
    last_actions[np.arange(n_agents), rng.integers(n_actions, size=n_agents)] = 1.0
    last_roles = np.zeros((max_agents, d_role), dtype=np.float32)
    last_roles[:n_agents] = rng.normal(size=(n_agents, d_role)).astype(np.float32)
    return EntityObservation(
        entity_features=feats,
        obs_mask=obs_mask,
        team_mask=team_mask,
        last_actions=last_actions,
        last_roles=last_roles,
    )


def collect_episode(
    n_agents: int,
    steps: int,
    seed: int = 0,
    d_role: int = 8,
    t_role: int = 5,
    terminal: bool = False,
) -> dict:
    """Random-action episode recorded the way the training loop records."""
    rng = np.random.default_rng(seed)
    env = ResourceCollectionEnv(d_role=d_role)
    obs = env.reset(TeamSpec(n_agents=n_agents, seed=seed))
    rec = EpisodeRecorder()
    roles = np.zeros((MAX_AGENTS, d_role), dtype=np.float32)
    for t in range(steps):
        if t % t_role == 0:
            roles = np.zeros((MAX_AGENTS, d_role), dtype=np.float32)
            roles[:n_agents] = rng.normal(size=(n_agents, d_role))
            env.set_roles(roles)
        rec.record_obs(obs, roles)
        actions = rng.integers(0, env.n_actions, size=n_agents)
        obs, reward, done, _ = env.step(actions)
        padded = np.zeros(MAX_AGENTS, dtype=np.int64)
        padded[:n_agents] = actions
        rec.record_transition(padded, reward, done or (terminal and t == steps - 1))
    rec.record_obs(obs, roles)
    mask = np.zeros(MAX_AGENTS, dtype=bool)
    mask[:n_agents] = True
    return rec.finish(mask)


def collect_batch(
    n_agents: int = 2,
    steps: int = 6,
    n_episodes: int = 2,
    seed: int = 0,
    d_role: int = 8,
    terminal: bool = False,
):
    return stack_episodes(
        [
            collect_episode(
                n_agents, steps, seed=seed + k, d_role=d_role, terminal=terminal
            )
            for k in range(n_episodes)
        ]
    )
