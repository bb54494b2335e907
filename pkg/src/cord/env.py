"""Resource-collection gridworld with variable team sizes.

A 12x12 grid with a fixed home cell. Teams of 1-8 agents collect nine
resources (three each of red, green, blue) and carry them home while
invaders periodically spawn at the border and walk greedily toward home.
Rewards are shared: +5 per deposited resource, +3 per intercepted
invader, -10 per invader that reaches home. Episodes last exactly 145
steps. Observations are entity-structured with a Chebyshev visibility
radius of 2; self and home are always visible.

Scripted built-in policies fill the non-controlled slots in the
unseen-agent generalization protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .obs import EntityObservation, pad_layout

GRID_SIZE = 12
EPISODE_LIMIT = 145
VISIBILITY_RADIUS = 2
HOME_CELL = (6, 6)
N_ACTIONS = 5  # no-op, up, down, left, right
RESOURCE_TYPES = 3
RESOURCES_PER_TYPE = 3
N_RESOURCES = RESOURCE_TYPES * RESOURCES_PER_TYPE
INVADER_PERIOD = 20
MAX_AGENTS = 8
MAX_INVADERS = EPISODE_LIMIT // INVADER_PERIOD  # one slot per scheduled spawn

REWARD_DEPOSIT = 5.0
REWARD_INTERCEPT = 3.0
REWARD_BREACH = -10.0

# action index -> (dx, dy); up decreases y
ACTION_DELTAS = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))

LAYOUT = pad_layout(MAX_AGENTS, N_RESOURCES, MAX_INVADERS)
N_ENTITIES = LAYOUT["n_entities"]

# feature layout: x, y, type one-hot (agent/resource/invader/home),
# payload one-hot (red/green/blue), carrying flag
FEAT_DIM = 10
_TYPE_AGENT, _TYPE_RESOURCE, _TYPE_INVADER, _TYPE_HOME = range(4)

BUILTIN_POLICIES = ("greedy_collector", "invader_chaser", "mixed")


@dataclass(frozen=True)
class TeamSpec:
    """Team composition: which slots exist and which the learner controls."""

    n_agents: int
    controlled_indices: tuple[int, ...] | None = None  # None = all controlled
    builtin_policy: str = "mixed"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_agents <= MAX_AGENTS:
            raise ValueError(f"n_agents must be in [1, {MAX_AGENTS}]")
        if self.controlled_indices is not None:
            if len(self.controlled_indices) == 0:
                raise ValueError("controlled_indices must be nonempty")
            if any(not 0 <= i < self.n_agents for i in self.controlled_indices):
                raise ValueError("controlled index out of range")
        if self.builtin_policy not in BUILTIN_POLICIES:
            raise ValueError(f"unknown builtin policy {self.builtin_policy!r}")

    @property
    def controlled(self) -> tuple[int, ...]:
        if self.controlled_indices is None:
            return tuple(range(self.n_agents))
        return tuple(sorted(self.controlled_indices))

    @property
    def builtin(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_agents) if i not in self.controlled)


@dataclass
class WorldState:
    agent_pos: np.ndarray          # [n_agents, 2] int
    carried: np.ndarray            # [n_agents] int, -1 = empty, else resource type
    resource_pos: np.ndarray       # [N_RESOURCES, 2] int
    resource_type: np.ndarray      # [N_RESOURCES] int
    resource_alive: np.ndarray     # [N_RESOURCES] bool
    invader_pos: np.ndarray        # [MAX_INVADERS, 2] int
    invader_alive: np.ndarray      # [MAX_INVADERS] bool
    invaders_spawned: int = 0
    step_count: int = 0

    def copy(self) -> "WorldState":
        return WorldState(
            agent_pos=self.agent_pos.copy(),
            carried=self.carried.copy(),
            resource_pos=self.resource_pos.copy(),
            resource_type=self.resource_type.copy(),
            resource_alive=self.resource_alive.copy(),
            invader_pos=self.invader_pos.copy(),
            invader_alive=self.invader_alive.copy(),
            invaders_spawned=self.invaders_spawned,
            step_count=self.step_count,
        )

    def canonical(self) -> tuple:
        """Hashable full-state tuple for replay-log fingerprints."""
        return (
            tuple(map(tuple, self.agent_pos.tolist())),
            tuple(self.carried.tolist()),
            tuple(map(tuple, self.resource_pos.tolist())),
            tuple(self.resource_type.tolist()),
            tuple(self.resource_alive.tolist()),
            tuple(map(tuple, self.invader_pos.tolist())),
            tuple(self.invader_alive.tolist()),
            self.invaders_spawned,
            self.step_count,
        )


def _step_toward(src: tuple[int, int], dst: tuple[int, int]) -> int:
    """Deterministic greedy action toward dst, ties broken by action index."""
    best_action, best_dist = 0, abs(dst[0] - src[0]) + abs(dst[1] - src[1])
    for action in (1, 2, 3, 4):
        dx, dy = ACTION_DELTAS[action]
        nx = min(max(src[0] + dx, 0), GRID_SIZE - 1)
        ny = min(max(src[1] + dy, 0), GRID_SIZE - 1)
        dist = abs(dst[0] - nx) + abs(dst[1] - ny)
        if dist < best_dist:
            best_action, best_dist = action, dist
    return best_action


def builtin_action(state: WorldState, agent_index: int, policy_kind: str) -> int:
    """Scripted action for a built-in agent; deterministic given the state."""
    if policy_kind == "mixed":
        policy_kind = "greedy_collector" if agent_index % 2 == 0 else "invader_chaser"
    pos = tuple(state.agent_pos[agent_index])
    if policy_kind == "greedy_collector":
        if state.carried[agent_index] >= 0:
            return _step_toward(pos, HOME_CELL)
        best, best_dist = None, None
        for r in range(N_RESOURCES):
            if not state.resource_alive[r]:
                continue
            d = abs(state.resource_pos[r, 0] - pos[0]) + abs(
                state.resource_pos[r, 1] - pos[1]
            )
            if best_dist is None or d < best_dist:
                best, best_dist = r, d
        if best is None:
            return 0
        return _step_toward(pos, tuple(state.resource_pos[best]))
    if policy_kind == "invader_chaser":
        best, best_dist = None, None
        for k in range(MAX_INVADERS):
            if not state.invader_alive[k]:
                continue
            d = abs(state.invader_pos[k, 0] - pos[0]) + abs(
                state.invader_pos[k, 1] - pos[1]
            )
            if best_dist is None or d < best_dist:
                best, best_dist = k, d
        if best is None:
            return 0
        return _step_toward(pos, tuple(state.invader_pos[best]))
    raise ValueError(f"unknown builtin policy {policy_kind!r}")


class ResourceCollectionEnv:
    """Single-threaded environment instance; one owner per rollout worker."""

    n_actions = N_ACTIONS
    feat_dim = FEAT_DIM
    n_entities = N_ENTITIES
    max_agents = MAX_AGENTS
    episode_limit = EPISODE_LIMIT

    def __init__(self, d_role: int = 8):
        self.d_role = d_role
        self.spec: TeamSpec | None = None
        self.state: WorldState | None = None
        self._rng: np.random.Generator | None = None
        self._last_actions: np.ndarray | None = None
        self._last_roles: np.ndarray | None = None

    @property
    def n_agents(self) -> int:
        return self.spec.n_agents

    def reset(self, spec: TeamSpec) -> EntityObservation:
        """Start an episode: agents at home, 9 resources in seeded cells."""
        self.spec = spec
        self._rng = np.random.default_rng(spec.seed)
        n = spec.n_agents
        agent_pos = np.tile(np.array(HOME_CELL, dtype=np.int64), (n, 1))
        cells = [
            (x, y)
            for x in range(GRID_SIZE)
            for y in range(GRID_SIZE)
            if (x, y) != HOME_CELL
        ]
        idx = self._rng.choice(len(cells), size=N_RESOURCES, replace=False)
        resource_pos = np.array([cells[i] for i in idx], dtype=np.int64)
        resource_type = np.repeat(np.arange(RESOURCE_TYPES), RESOURCES_PER_TYPE)
        self.state = WorldState(
            agent_pos=agent_pos,
            carried=np.full(n, -1, dtype=np.int64),
            resource_pos=resource_pos,
            resource_type=resource_type.astype(np.int64),
            resource_alive=np.ones(N_RESOURCES, dtype=bool),
            invader_pos=np.zeros((MAX_INVADERS, 2), dtype=np.int64),
            invader_alive=np.zeros(MAX_INVADERS, dtype=bool),
        )
        self._last_actions = np.zeros((MAX_AGENTS, N_ACTIONS), dtype=np.float32)
        self._last_actions[:n, 0] = 1.0  # no-op before the first step
        self._last_roles = np.zeros((MAX_AGENTS, self.d_role), dtype=np.float32)
        return self.observe()

    def set_roles(self, roles: np.ndarray) -> None:
        """Record the roles currently in effect (reported as c_{t-1})."""
        self._last_roles[: self.n_agents] = roles[: self.n_agents]

    def step(self, joint_action) -> tuple[EntityObservation, float, bool, dict]:
        """Advance one tick with simultaneous agent moves.

        Order: agents move (clamped at walls), pickups, deposits,
        interception of co-located invaders, invader moves, breach check,
        then scheduled invader spawn.
        """
        s = self.state
        n = self.n_agents
        joint_action = np.asarray(joint_action, dtype=np.int64)
        if joint_action.shape != (n,):
            raise ValueError(f"expected {n} actions, got {joint_action.shape}")
        if ((joint_action < 0) | (joint_action >= N_ACTIONS)).any():
            raise ValueError(f"invalid action index in {joint_action}")

        deltas = np.array([ACTION_DELTAS[a] for a in joint_action], dtype=np.int64)
        s.agent_pos = np.clip(s.agent_pos + deltas, 0, GRID_SIZE - 1)

        reward = 0.0
        deposits = intercepts = breaches = 0

        # pickups: lowest agent index wins a contested resource
        for i in range(n):
            if s.carried[i] >= 0:
                continue
            for r in range(N_RESOURCES):
                if s.resource_alive[r] and (s.resource_pos[r] == s.agent_pos[i]).all():
                    s.carried[i] = s.resource_type[r]
                    s.resource_alive[r] = False
                    break

        # deposits at home
        for i in range(n):
            if s.carried[i] >= 0 and tuple(s.agent_pos[i]) == HOME_CELL:
                s.carried[i] = -1
                deposits += 1
                reward += REWARD_DEPOSIT

        # interception: any invader sharing a cell with any agent is removed
        for k in range(MAX_INVADERS):
            if not s.invader_alive[k]:
                continue
            if (s.agent_pos == s.invader_pos[k]).all(axis=1).any():
                s.invader_alive[k] = False
                intercepts += 1
                reward += REWARD_INTERCEPT

        # invaders walk one greedy step toward home, then breach check
        for k in range(MAX_INVADERS):
            if not s.invader_alive[k]:
                continue
            x, y = s.invader_pos[k]
            dx, dy = HOME_CELL[0] - x, HOME_CELL[1] - y
            if abs(dx) >= abs(dy) and dx != 0:
                x += 1 if dx > 0 else -1
            elif dy != 0:
                y += 1 if dy > 0 else -1
            s.invader_pos[k] = (x, y)
            if (x, y) == HOME_CELL:
                s.invader_alive[k] = False
                breaches += 1
                reward += REWARD_BREACH

        s.step_count += 1
        if (
            s.step_count % INVADER_PERIOD == 0
            and s.step_count < EPISODE_LIMIT
            and s.invaders_spawned < MAX_INVADERS
        ):
            side = self._rng.integers(4)
            offset = int(self._rng.integers(GRID_SIZE))
            cell = {
                0: (offset, 0),
                1: (offset, GRID_SIZE - 1),
                2: (0, offset),
                3: (GRID_SIZE - 1, offset),
            }[int(side)]
            k = s.invaders_spawned
            s.invader_pos[k] = cell
            s.invader_alive[k] = True
            s.invaders_spawned += 1

        self._last_actions[:] = 0.0
        self._last_actions[np.arange(n), joint_action] = 1.0

        done = s.step_count >= EPISODE_LIMIT
        info = {"deposits": deposits, "intercepts": intercepts, "breaches": breaches}
        return self.observe(), reward, done, info

    def observe(self) -> EntityObservation:
        """Entity features, per-agent visibility, and existence masks."""
        s = self.state
        n = self.n_agents
        feats = np.zeros((N_ENTITIES, FEAT_DIM), dtype=np.float32)
        team_mask = np.zeros(N_ENTITIES, dtype=bool)
        scale = 1.0 / (GRID_SIZE - 1)

        rows_a = LAYOUT["agents"]
        for i in range(n):
            row = rows_a.start + i
            feats[row, 0:2] = s.agent_pos[i] * scale
            feats[row, 2 + _TYPE_AGENT] = 1.0
            if s.carried[i] >= 0:
                feats[row, 6 + s.carried[i]] = 1.0
                feats[row, 9] = 1.0
            team_mask[row] = True

        rows_r = LAYOUT["resources"]
        for r in range(N_RESOURCES):
            if not s.resource_alive[r]:
                continue
            row = rows_r.start + r
            feats[row, 0:2] = s.resource_pos[r] * scale
            feats[row, 2 + _TYPE_RESOURCE] = 1.0
            feats[row, 6 + s.resource_type[r]] = 1.0
            team_mask[row] = True

        rows_i = LAYOUT["invaders"]
        for k in range(MAX_INVADERS):
            if not s.invader_alive[k]:
                continue
            row = rows_i.start + k
            feats[row, 0:2] = s.invader_pos[k] * scale
            feats[row, 2 + _TYPE_INVADER] = 1.0
            team_mask[row] = True

        home_row = LAYOUT["home"]
        feats[home_row, 0:2] = np.array(HOME_CELL) * scale
        feats[home_row, 2 + _TYPE_HOME] = 1.0
        team_mask[home_row] = True

        # visibility: Chebyshev radius around each agent; self and home always
        positions = np.zeros((N_ENTITIES, 2), dtype=np.int64)
        positions[rows_a.start : rows_a.start + n] = s.agent_pos
        positions[rows_r] = s.resource_pos
        positions[rows_i] = s.invader_pos
        positions[home_row] = HOME_CELL
        obs_mask = np.zeros((MAX_AGENTS, N_ENTITIES), dtype=bool)
        for i in range(n):
            cheb = np.abs(positions - s.agent_pos[i]).max(axis=1)
            visible = (cheb <= VISIBILITY_RADIUS) & team_mask
            visible[rows_a.start + i] = True
            visible[home_row] = True
            obs_mask[i] = visible

        return EntityObservation(
            entity_features=feats,
            obs_mask=obs_mask,
            team_mask=team_mask,
            last_actions=self._last_actions.copy(),
            last_roles=self._last_roles.copy(),
        )
