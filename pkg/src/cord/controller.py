"""High-level controller: team encoding, per-agent influence attention,
and Gaussian role heads.

The forward pass encodes entity observations, fuses each agent's view
with the team state through masked multi-head attention, computes
per-agent influence vectors as attention over the other agents'
keys/values, and emits two diagonal Gaussians per agent: the posterior
conditioned on the influence vector and a baseline conditioned on a
constant zero influence. The same head weights serve both, so the two
coincide exactly when the influence vector equals the constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .obs import EntityObservation
from .rolemath import LOG_STD_MAX, LOG_STD_MIN, RoleGaussian


@dataclass
class InfluenceBundle:
    """Attention internals for one agent: query, others' keys/values,
    per-head weights over the others, and the influence vector."""

    query: Tensor      # [D]
    keys: Tensor       # [N, D]
    values: Tensor     # [N, D]
    weights: Tensor    # [H, N], zero at self and masked agents
    influence: Tensor  # [D]


@dataclass
class ControllerOutput:
    query: Tensor      # [B, N, D]
    keys: Tensor       # [B, N, D]
    values: Tensor     # [B, N, D]
    weights: Tensor    # [B, H, N, N]
    influence: Tensor  # [B, N, D]
    posterior: RoleGaussian  # [B, N, d_role]
    baseline: RoleGaussian   # [B, N, d_role]


def team_batch(observations: list[EntityObservation], device=None) -> dict:
    """Stack EntityObservations into the tensor dict the networks consume."""
    def stack(getter, dtype):
        arr = np.stack([getter(o) for o in observations])
        return torch.as_tensor(arr, device=device).to(dtype)

    return {
        "features": stack(lambda o: o.entity_features, torch.float32),
        "obs_mask": stack(lambda o: o.obs_mask, torch.bool),
        "team_mask": stack(lambda o: o.team_mask, torch.bool),
        "agent_mask": stack(lambda o: o.agent_mask, torch.bool),
        "last_actions": stack(lambda o: o.last_actions, torch.float32),
        "last_roles": stack(lambda o: o.last_roles, torch.float32),
    }


class MaskedSelfAttention(nn.Module):
    """Standard multi-head self-attention over agent slots with a key-side
    existence mask."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        assert dim % n_heads == 0
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        b, n, d = x.shape
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(x).view(b, n, h, hd).transpose(1, 2)
        k = self.k_proj(x).view(b, n, h, hd).transpose(1, 2)
        v = self.v_proj(x).view(b, n, h, hd).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)  # [B, H, N, N]
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        attn = torch.nan_to_num(attn, nan=0.0)  # rows with no valid keys
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class RoleController(nn.Module):
    """Maps a team observation to per-agent role Gaussians.

    Pipeline: entity encoder -> per-agent visible pooling -> observation
    encoder -> team-fusion attention -> individual query -> cross-agent
    influence attention -> mean/log-std heads (log-std clamped).
    """

    def __init__(
        self,
        feat_dim: int,
        n_actions: int,
        d_role: int = 8,
        embed_dim: int = 128,
        n_heads: int = 4,
    ):
        super().__init__()
        assert embed_dim % n_heads == 0
        self.d_role = d_role
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.head_dim = embed_dim // n_heads

        self.entity_fc = nn.Linear(feat_dim, embed_dim)
        self.obs_fc = nn.Linear(embed_dim, embed_dim)
        self.act_fc = nn.Linear(n_actions, embed_dim)
        self.team_attn = MaskedSelfAttention(embed_dim, n_heads)
        self.indiv_fc = nn.Linear(2 * embed_dim, embed_dim)
        self.key_fc = nn.Linear(2 * embed_dim + d_role, embed_dim)
        self.val_fc = nn.Linear(2 * embed_dim + d_role, embed_dim)
        self.head_fc = nn.Linear(2 * embed_dim, embed_dim)
        self.mean_head = nn.Linear(embed_dim, d_role)
        self.log_std_head = nn.Linear(embed_dim, d_role)

    @property
    def dtype(self) -> torch.dtype:
        return self.entity_fc.weight.dtype

    def forward(self, batch: dict, check: bool = False) -> ControllerOutput:
        dt = self.dtype
        feats = batch["features"].to(dt)
        team_mask = batch["team_mask"]
        obs_mask = batch["obs_mask"]
        agent_mask = batch["agent_mask"]
        last_actions = batch["last_actions"].to(dt)
        last_roles = batch["last_roles"].to(dt)
        b, n_ent, _ = feats.shape
        n = agent_mask.shape[1]

        ent = F.relu(self.entity_fc(feats))
        ent = ent * team_mask.unsqueeze(-1).to(dt)

        counts = obs_mask.sum(dim=-1, keepdim=True).clamp_min(1).to(dt)
        pooled = obs_mask.to(dt) @ ent / counts  # [B, N, D]
        obs_emb = F.relu(self.obs_fc(pooled))

        fused = self.team_attn(obs_emb, agent_mask)
        query = F.relu(self.indiv_fc(torch.cat([obs_emb, fused], dim=-1)))

        act_emb = F.relu(self.act_fc(last_actions))
        kv_in = torch.cat([obs_emb, act_emb, last_roles], dim=-1)
        keys = self.key_fc(kv_in)
        values = self.val_fc(kv_in)

        # influence attention: per-head dot products, softmax over j != i,
        # no output projection so the result stays a per-head convex
        # combination of the others' value vectors
        h, hd = self.n_heads, self.head_dim
        qh = query.view(b, n, h, hd).transpose(1, 2)
        kh = keys.view(b, n, h, hd).transpose(1, 2)
        vh = values.view(b, n, h, hd).transpose(1, 2)
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(hd)  # [B, H, N, N]
        eye = torch.eye(n, dtype=torch.bool, device=feats.device)
        blocked = eye[None, None] | ~agent_mask[:, None, None, :]
        logits = logits.masked_fill(blocked, float("-inf"))
        weights = torch.nan_to_num(torch.softmax(logits, dim=-1), nan=0.0)
        influence = (weights @ vh).transpose(1, 2).reshape(b, n, self.embed_dim)

        amask = agent_mask.unsqueeze(-1).to(dt)
        query = query * amask
        influence = influence * amask

        posterior = self._role_head(query, influence, amask)
        baseline = self._role_head(query, torch.zeros_like(influence), amask)

        out = ControllerOutput(
            query=query,
            keys=keys * amask,
            values=values * amask,
            weights=weights * agent_mask[:, None, :, None].to(dt),
            influence=influence,
            posterior=posterior,
            baseline=baseline,
        )
        if check:
            self._check_invariants(out, agent_mask)
        return out

    def role_head(self, query: Tensor, influence: Tensor | None = None) -> RoleGaussian:
        """Gaussian head over roles given (query, influence).

        influence None evaluates the constant-intervention baseline: the
        same head with the influence replaced by the zero vector.
        """
        if influence is None:
            influence = torch.zeros_like(query)
        hid = F.relu(self.head_fc(torch.cat([query, influence], dim=-1)))
        mean = self.mean_head(hid)
        log_std = self.log_std_head(hid).clamp(LOG_STD_MIN, LOG_STD_MAX)
        return RoleGaussian(mean, log_std)

    def _role_head(self, query: Tensor, influence: Tensor, amask: Tensor) -> RoleGaussian:
        dist = self.role_head(query, influence)
        return RoleGaussian(dist.mean * amask, dist.log_std * amask)

    @staticmethod
    def _check_invariants(out: ControllerOutput, agent_mask: Tensor) -> None:
        w = out.weights
        if bool((w < 0).any()):
            raise AssertionError("negative attention weight")
        if bool(w.diagonal(dim1=-2, dim2=-1).abs().max() > 0):
            raise AssertionError("self-attention weight not excluded")
        gone = ~agent_mask[:, None, None, :].expand_as(w)
        if gone.any() and bool(w[gone].abs().max() > 0):
            raise AssertionError("masked agent received attention weight")
        sums = w.sum(dim=-1)  # [B, H, N]
        others = (agent_mask.sum(dim=1, keepdim=True) > 1) & agent_mask
        active = others[:, None, :].expand_as(sums)
        if active.any() and bool((sums[active] - 1.0).abs().max() > 1e-5):
            raise AssertionError("attention weights do not sum to 1")

    # ---- per-agent views of a single observation (convenience surface) ----

    def _single(self, obs: EntityObservation) -> ControllerOutput:
        return self.forward(team_batch([obs]))

    def encode_query(self, obs: EntityObservation, agent_index: int) -> Tensor:
        if not obs.agent_mask[agent_index]:
            raise IndexError(f"agent {agent_index} does not exist in this team")
        return self._single(obs).query[0, agent_index]

    def influence_vector(
        self, obs: EntityObservation, agent_index: int
    ) -> InfluenceBundle:
        if not obs.agent_mask[agent_index]:
            raise IndexError(f"agent {agent_index} does not exist in this team")
        out = self._single(obs)
        return InfluenceBundle(
            query=out.query[0, agent_index],
            keys=out.keys[0],
            values=out.values[0],
            weights=out.weights[0, :, agent_index],
            influence=out.influence[0, agent_index],
        )

    def posterior(self, obs: EntityObservation, agent_index: int) -> RoleGaussian:
        out = self._single(obs)
        return out.posterior[0, agent_index]

    def do_baseline(self, obs: EntityObservation, agent_index: int) -> RoleGaussian:
        out = self._single(obs)
        return out.baseline[0, agent_index]


def sample_roles(
    posteriors: RoleGaussian,
    mode: str = "stochastic",
    generator: torch.Generator | None = None,
) -> Tensor:
    """Draw roles from per-agent posteriors.

    stochastic mode is the reparameterized draw mean + std * eps so
    gradients flow back into the controller; mean mode is deterministic
    for evaluation.
    """
    if mode == "mean":
        return posteriors.mean
    if mode == "stochastic":
        return posteriors.sample(generator)
    raise ValueError(f"unknown sampling mode {mode!r}")
