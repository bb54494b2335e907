"""Entity-structured team observations with visibility and existence masks.

One EntityObservation describes the whole team at one timestep: a shared
entity-feature matrix, a per-agent visibility mask over entities, an
existence mask used for padding to fixed maximum sizes, plus the previous
joint action and the roles currently in effect (zeros until a controller
assigns them).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# shared entity-feature column layout: absolute position, entity-type
# one-hot (agent/resource/invader/home), payload one-hot (red/green/blue),
# carrying flag
FEAT_XY = slice(0, 2)
FEAT_TYPE = slice(2, 6)
FEAT_PAYLOAD = slice(6, 10)
N_ENTITY_TYPES = 4


@dataclass
class EntityObservation:
    entity_features: np.ndarray  # [E, F] float32, zero rows for padding
    obs_mask: np.ndarray         # [max_agents, E] bool, row i = visible to agent i
    team_mask: np.ndarray        # [E] bool, existing entities
    last_actions: np.ndarray     # [max_agents, n_actions] float32 one-hot
    last_roles: np.ndarray       # [max_agents, d_role] float32
    avail_actions: np.ndarray = field(default=None)  # [max_agents, n_actions] bool

    def __post_init__(self):
        if self.avail_actions is None:
            n_agents, n_actions = self.last_actions.shape
            self.avail_actions = np.ones((n_agents, n_actions), dtype=bool)

    @property
    def max_agents(self) -> int:
        return self.obs_mask.shape[0]

    @property
    def agent_mask(self) -> np.ndarray:
        """Existence mask restricted to the leading agent slots."""
        return self.team_mask[: self.max_agents]

    def validate(self) -> None:
        """Check mask consistency and inert padding."""
        if self.obs_mask.shape[1] != self.entity_features.shape[0]:
            raise ValueError("obs_mask and entity_features disagree on entity count")
        if (self.obs_mask & ~self.team_mask[None, :]).any():
            raise ValueError("obs_mask grants visibility to nonexistent entities")
        if self.entity_features[~self.team_mask].any():
            raise ValueError("padded entities carry nonzero features")


def pad_layout(max_agents: int, max_resources: int, max_invaders: int) -> dict:
    """Fixed row layout: agents, then resources, then invaders, then home."""
    return {
        "agents": slice(0, max_agents),
        "resources": slice(max_agents, max_agents + max_resources),
        "invaders": slice(
            max_agents + max_resources, max_agents + max_resources + max_invaders
        ),
        "home": max_agents + max_resources + max_invaders,
        "n_entities": max_agents + max_resources + max_invaders + 1,
    }
