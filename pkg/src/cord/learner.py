"""Low-level agents and the value-decomposition learner.

Role-conditioned recurrent utility networks produce per-agent action
values; a hypernetwork mixer with non-negative (absolute-value) weights
and attention pooling over the variable team combines them into a joint
value. Training minimizes a double-Q TD loss on shaped rewards: the
online network selects the bootstrap action, the target network
evaluates it. Intrinsic rewards are recomputed from stored observations
with the current controller and enter the targets as constants.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import rolemath
from .controller import RoleController
from .obs import FEAT_PAYLOAD, FEAT_TYPE, FEAT_XY, N_ENTITY_TYPES
from .replay import EpisodeBatch

NEG_INF = float("-inf")


class UtilityNet(nn.Module):
    """Recurrent per-agent Q-network conditioned on the assigned role.

    Parameters are shared across agents. Each agent's visible entities are
    summarized egocentrically: per entity type, the mean offset from the
    agent plus pooled payload flags and a visible-count channel. The
    summary is concatenated with the agent's own features, its previous
    action, and its role.
    """

    # per type: mean (dx, dy), pooled payload block, presence, scaled count
    _TYPE_SUMMARY = 2 + (FEAT_PAYLOAD.stop - FEAT_PAYLOAD.start) + 2

    def __init__(
        self,
        feat_dim: int,
        n_actions: int,
        d_role: int = 8,
        hidden_dim: int = 64,
    ):
        super().__init__()
        self.n_actions = n_actions
        self.hidden_dim = hidden_dim
        summary_dim = N_ENTITY_TYPES * self._TYPE_SUMMARY
        self.in_fc = nn.Linear(
            feat_dim + summary_dim + n_actions + d_role, hidden_dim
        )
        self.rnn = nn.GRU(hidden_dim, hidden_dim, batch_first=True)
        self.q_fc = nn.Linear(hidden_dim, n_actions)

    @property
    def dtype(self) -> torch.dtype:
        return self.in_fc.weight.dtype

    def init_hidden(self, batch: int, n_agents: int) -> Tensor:
        return torch.zeros(batch, n_agents, self.hidden_dim, dtype=self.dtype)

    def embed_inputs(
        self,
        features: Tensor,      # [B, E, F]
        obs_mask: Tensor,      # [B, N, E] bool
        last_actions: Tensor,  # [B, N, A]
        roles: Tensor,         # [B, N, d]
    ) -> Tensor:
        """Non-recurrent part of the forward pass; batches over steps."""
        dt = self.dtype
        features = features.to(dt)
        b, e, _ = features.shape
        n = obs_mask.shape[1]
        self_feat = features[:, :n]

        pos = features[..., FEAT_XY]                      # [B, E, 2]
        rel = pos.unsqueeze(1) - self_feat[..., FEAT_XY].unsqueeze(2)
        payload = features[..., FEAT_PAYLOAD]             # [B, E, P]
        type_onehot = features[..., FEAT_TYPE]            # [B, E, T]

        vis = obs_mask.to(dt)                             # [B, N, E]
        # an agent's own entity row stays out of its agent-type pool
        diag = torch.eye(n, e, dtype=dt, device=features.device)
        vis = vis * (1.0 - diag.unsqueeze(0))

        chunks = []
        for t in range(N_ENTITY_TYPES):
            w = vis * type_onehot[:, None, :, t]          # [B, N, E]
            cnt = w.sum(dim=-1, keepdim=True)             # [B, N, 1]
            denom = cnt.clamp_min(1.0)
            mean_rel = (w.unsqueeze(-1) * rel).sum(dim=2) / denom
            mean_payload = (
                w.unsqueeze(-1) * payload.unsqueeze(1)
            ).sum(dim=2) / denom
            chunks.extend(
                [mean_rel, mean_payload, (cnt > 0).to(dt), cnt / e]
            )

        x = torch.cat(
            [self_feat] + chunks + [last_actions.to(dt), roles.to(dt)], dim=-1
        )
        return F.relu(self.in_fc(x))

    def forward(self, x: Tensor, hidden: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrent step. x, hidden: [B, N, H] -> (q [B, N, A], h')."""
        b, n, h = x.shape
        out, h_new = self.rnn(
            x.reshape(b * n, 1, h), hidden.reshape(1, b * n, h).contiguous()
        )
        new_hidden = h_new.view(b, n, h)
        return self.q_fc(out.view(b, n, h)), new_hidden

    def forward_sequence(self, x: Tensor) -> Tensor:
        """Whole-episode pass. x [B, T, N, H] -> q [B, T, N, A]."""
        b, t, n, h = x.shape
        seq = x.permute(0, 2, 1, 3).reshape(b * n, t, h)
        out, _ = self.rnn(seq, torch.zeros(1, b * n, h, dtype=x.dtype))
        q = self.q_fc(out)
        return q.view(b, n, t, -1).permute(0, 2, 1, 3)


def masked_argmax(q: Tensor, avail: Tensor) -> Tensor:
    """Greedy actions with unavailable entries masked to -inf."""
    return q.masked_fill(~avail, NEG_INF).argmax(dim=-1)


def masked_td_loss(q_tot: Tensor, targets: Tensor, filled: Tensor) -> Tensor:
    """Mean squared TD error over valid steps; padded steps contribute zero."""
    filled = filled.to(q_tot.dtype)
    err = (q_tot - targets.to(q_tot.dtype)) * filled
    return (err ** 2).sum() / filled.sum().clamp_min(1)


class AttentionMixer(nn.Module):
    """Monotonic mixing of per-agent utilities into a joint value.

    The team state is attention-pooled from entity embeddings with a
    learned query; hypernetworks generate the mixing weights, which pass
    through an absolute value so every partial derivative of the joint
    value with respect to an agent utility is non-negative. Supports any
    team size up to the padding limit via the agent mask.

    nonneg=False removes the absolute value; this deliberately broken
    variant exists only so the monotonicity audit can demonstrate that it
    detects violations.
    """

    def __init__(
        self,
        feat_dim: int,
        embed_dim: int = 32,
        hyper_dim: int = 64,
        n_heads: int = 4,
        nonneg: bool = True,
    ):
        super().__init__()
        assert hyper_dim % n_heads == 0
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.head_dim = hyper_dim // n_heads
        self.nonneg = nonneg
        self.entity_fc = nn.Linear(feat_dim, hyper_dim)
        self.pool_query = nn.Parameter(torch.randn(n_heads, self.head_dim))
        self.pool_k = nn.Linear(hyper_dim, hyper_dim)
        self.pool_v = nn.Linear(hyper_dim, hyper_dim)
        self.w1_hyper = nn.Sequential(
            nn.Linear(2 * hyper_dim, hyper_dim),
            nn.ReLU(),
            nn.Linear(hyper_dim, embed_dim),
        )
        self.b1_hyper = nn.Linear(hyper_dim, embed_dim)
        self.w2_hyper = nn.Sequential(
            nn.Linear(hyper_dim, hyper_dim),
            nn.ReLU(),
            nn.Linear(hyper_dim, embed_dim),
        )
        self.v_hyper = nn.Sequential(
            nn.Linear(hyper_dim, embed_dim),
            nn.ReLU(),
            nn.Linear(embed_dim, 1),
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.entity_fc.weight.dtype

    def _state_embedding(self, features: Tensor, team_mask: Tensor) -> Tensor:
        dt = self.dtype
        ent = F.relu(self.entity_fc(features.to(dt)))  # [B, E, D]
        b, e, d = ent.shape
        h, hd = self.n_heads, self.head_dim
        k = self.pool_k(ent).view(b, e, h, hd).transpose(1, 2)  # [B, H, E, hd]
        v = self.pool_v(ent).view(b, e, h, hd).transpose(1, 2)
        logits = (k @ self.pool_query.unsqueeze(-1).to(dt)).squeeze(-1)
        logits = logits / (hd ** 0.5)
        logits = logits.masked_fill(~team_mask[:, None, :], NEG_INF)
        attn = torch.softmax(logits, dim=-1)  # [B, H, E]
        pooled = (attn.unsqueeze(-2) @ v).squeeze(-2)  # [B, H, hd]
        return pooled.reshape(b, h * hd), ent

    def forward(
        self,
        utilities: Tensor,  # [B, N]
        features: Tensor,   # [B, E, F]
        team_mask: Tensor,  # [B, E] bool
        agent_mask: Tensor,  # [B, N] bool
    ) -> Tensor:
        if not bool(agent_mask.any(dim=-1).all()):
            raise ValueError("mixing an empty team")
        dt = self.dtype
        state, ent = self._state_embedding(features, team_mask)
        n = agent_mask.shape[1]
        agent_emb = ent[:, :n]  # [B, N, D]
        state_rep = state.unsqueeze(1).expand(-1, n, -1)
        w1 = self.w1_hyper(torch.cat([state_rep, agent_emb], dim=-1))
        if self.nonneg:
            w1 = w1.abs()
        w1 = w1 * agent_mask.unsqueeze(-1).to(dt)  # [B, N, embed]
        b1 = self.b1_hyper(state)
        hidden = F.elu((utilities.to(dt).unsqueeze(-1) * w1).sum(dim=1) + b1)
        w2 = self.w2_hyper(state)
        if self.nonneg:
            w2 = w2.abs()
        v = self.v_hyper(state).squeeze(-1)
        return (hidden * w2).sum(dim=-1) + v


class Learner:
    """Owns the networks, optimizer, and target copies; runs TD updates."""

    def __init__(
        self,
        controller: RoleController,
        utility: UtilityNet,
        mixer: AttentionMixer,
        *,
        gamma: float = 0.99,
        lr: float = 3e-4,
        grad_clip: float = 10.0,
        lambda_c: float = 0.001,
        lambda_d: float = 0.001,
        r_c_clip: float = 50.0,
        t_role: int = 5,
        role_grad: bool = True,
        role_mode: str = "learned",  # "learned" or "uniform" (MaxEnt ablation)
        target_period: int = 200,
        seed: int = 0,
    ):
        self.controller = controller
        self.utility = utility
        self.mixer = mixer
        self.target_utility = copy.deepcopy(utility)
        self.target_mixer = copy.deepcopy(mixer)
        self.gamma = gamma
        self.grad_clip = grad_clip
        self.lambda_c = lambda_c
        self.lambda_d = lambda_d
        self.r_c_clip = r_c_clip
        self.t_role = t_role
        self.role_grad = role_grad
        self.role_mode = role_mode
        self.target_period = target_period
        self.params = (
            list(controller.parameters())
            + list(utility.parameters())
            + list(mixer.parameters())
        )
        self.opt = torch.optim.Adam(self.params, lr=lr)
        self.noise_gen = torch.Generator().manual_seed(seed)
        self.train_steps = 0
        self.episodes_seen = 0
        self.last_target_update_episode = 0

    # ---- batch plumbing -------------------------------------------------

    @staticmethod
    def batch_tensors(batch: EpisodeBatch) -> dict:
        return {
            "features": torch.as_tensor(batch.features),
            "obs_mask": torch.as_tensor(batch.obs_mask),
            "team_mask": torch.as_tensor(batch.team_mask),
            "agent_mask": torch.as_tensor(batch.agent_mask),
            "avail": torch.as_tensor(batch.avail),
            "last_actions": torch.as_tensor(batch.last_actions),
            "last_roles": torch.as_tensor(batch.last_roles),
            "roles": torch.as_tensor(batch.roles),
            "actions": torch.as_tensor(batch.actions),
            "reward": torch.as_tensor(batch.reward),
            "terminated": torch.as_tensor(batch.terminated),
            "filled": torch.as_tensor(batch.filled),
        }

    def _controller_pass(
        self,
        bt: dict,
        controller: RoleController,
        step_index: Tensor | None = None,
    ):
        """Run the controller over batch steps at once.

        step_index selects a subset of timesteps (e.g. role-assignment
        steps only), which keeps the gradient pass small.
        """
        def pick(key):
            arr = bt[key]
            return arr if step_index is None else arr.index_select(1, step_index)

        features = pick("features")
        b, t1 = features.shape[:2]
        flat = {
            "features": features.reshape(b * t1, *features.shape[2:]),
            "obs_mask": pick("obs_mask").reshape(b * t1, *bt["obs_mask"].shape[2:]),
            "team_mask": pick("team_mask").reshape(b * t1, -1),
            "agent_mask": bt["agent_mask"]
            .unsqueeze(1)
            .expand(-1, t1, -1)
            .reshape(b * t1, -1),
            "last_actions": pick("last_actions").reshape(
                b * t1, *bt["last_actions"].shape[2:]
            ),
            "last_roles": pick("last_roles").reshape(
                b * t1, *bt["last_roles"].shape[2:]
            ),
        }
        out = controller(flat)
        n, d = out.posterior.mean.shape[-2:]
        reshape = lambda x: x.view(b, t1, n, d)
        posterior = rolemath.RoleGaussian(
            reshape(out.posterior.mean), reshape(out.posterior.log_std)
        )
        baseline = rolemath.RoleGaussian(
            reshape(out.baseline.mean), reshape(out.baseline.log_std)
        )
        return posterior, baseline

    def intrinsic_rewards(self, bt: dict) -> tuple[Tensor, Tensor]:
        """Per-step intrinsic rewards from the current controller.

        Returns (r_c, r_d), each [B, T+1]; computed without gradients so
        shaped rewards act as constants in the TD targets. The causal term
        is capped at r_c_clip per step: the do-baseline KL has no upper
        bound and a saturated log-std head can spike it by orders of
        magnitude, which would swamp the environmental reward.
        """
        with torch.no_grad():
            posterior, baseline = self._controller_pass(bt, self.controller)
            amask = bt["agent_mask"].unsqueeze(1)  # [B, 1, N]
            kl = rolemath.gaussian_kl(posterior, baseline)  # [B, T+1, N]
            r_c = (kl * amask).sum(dim=-1).clamp_max(self.r_c_clip)
            aff = rolemath.affinity_matrix(
                posterior, agent_mask=amask.expand(-1, kl.shape[1], -1)
            )
            r_d = rolemath.diversity_reward(aff)
        return r_c, r_d

    def shaped_rewards(self, bt: dict) -> tuple[Tensor, dict]:
        t = bt["reward"].shape[1]
        if self.role_mode == "uniform" or (
            self.lambda_c == 0.0 and self.lambda_d == 0.0
        ):
            r_c = torch.zeros_like(bt["reward"])
            r_d = torch.zeros_like(bt["reward"])
            shaped = bt["reward"].clone()
        else:
            r_c_all, r_d_all = self.intrinsic_rewards(bt)
            r_c, r_d = r_c_all[:, :t], r_d_all[:, :t]
            shaped = bt["reward"] + self.lambda_c * r_c + self.lambda_d * r_d
        filled = bt["filled"].to(shaped.dtype)
        denom = filled.sum().clamp_min(1)
        stats = {
            "r_c": float((r_c * filled).sum() / denom),
            "r_d": float((r_d * filled).sum() / denom),
        }
        return shaped, stats

    def training_roles(
        self, bt: dict, role_noise: Tensor | None = None
    ) -> Tensor:
        """Roles fed to the utility networks during training, [B, T+1, N, d].

        With role gradients enabled, roles are re-sampled from the current
        posterior by reparameterization at assignment steps and held in
        between, so TD gradients reach the controller. Otherwise the
        stored roles from collection are used. role_noise, when given,
        carries one draw per step [B, T+1, N, d]; only the assignment-step
        slices are consumed.
        """
        if self.role_mode == "uniform" or not self.role_grad:
            return bt["roles"]
        t1 = bt["features"].shape[1]
        assign_idx = torch.arange(0, t1, self.t_role)
        posterior_sub, _ = self._controller_pass(
            bt, self.controller, step_index=assign_idx
        )
        if role_noise is None:
            role_noise = torch.randn(
                (bt["features"].shape[0], t1) + posterior_sub.mean.shape[2:],
                generator=self.noise_gen,
                dtype=posterior_sub.mean.dtype,
            )
        noise_sub = role_noise.to(posterior_sub.mean.dtype).index_select(
            1, assign_idx
        )
        sampled = posterior_sub.mean + posterior_sub.std * noise_sub
        return sampled.repeat_interleave(self.t_role, dim=1)[:, :t1]

    def _q_rollout(
        self, net: UtilityNet, bt: dict, roles: Tensor
    ) -> Tensor:
        """Run a utility network over all steps; returns q [B, T+1, N, A]."""
        b, t1, e, f = bt["features"].shape
        n = bt["obs_mask"].shape[2]
        x = net.embed_inputs(
            bt["features"].reshape(b * t1, e, f),
            bt["obs_mask"].reshape(b * t1, n, e),
            bt["last_actions"].reshape(b * t1, n, -1),
            roles.reshape(b * t1, n, -1),
        ).view(b, t1, n, -1)
        return net.forward_sequence(x)

    # ---- TD pieces ------------------------------------------------------

    def _mix_steps(
        self, mixer: AttentionMixer, utilities: Tensor, bt: dict, step_slice: slice
    ) -> Tensor:
        """Mix per-step utilities [B, T, N] into joint values [B, T]."""
        b, t, n = utilities.shape
        e, f = bt["features"].shape[2:]
        return mixer(
            utilities.reshape(b * t, n),
            bt["features"][:, step_slice].reshape(b * t, e, f),
            bt["team_mask"][:, step_slice].reshape(b * t, e),
            bt["agent_mask"].unsqueeze(1).expand(-1, t, -1).reshape(b * t, n),
        ).view(b, t)

    def _targets_from(
        self, bt: dict, shaped: Tensor, q_online: Tensor, q_target: Tensor
    ) -> Tensor:
        """y = r + gamma * Qtot_target(next, argmax over online Q); detached.

        The argmax comes from the online network, the evaluation from the
        target network. Terminal steps bootstrap nothing.
        """
        with torch.no_grad():
            next_sel = masked_argmax(q_online[:, 1:], bt["avail"][:, 1:])
            q_next = q_target[:, 1:].gather(-1, next_sel.unsqueeze(-1)).squeeze(-1)
            q_next = q_next * bt["agent_mask"].unsqueeze(1).to(q_next.dtype)
            qtot_next = self._mix_steps(
                self.target_mixer, q_next, bt, slice(1, None)
            )
            live = (~bt["terminated"]).to(qtot_next.dtype)
            return shaped.to(qtot_next.dtype) + self.gamma * live * qtot_next

    def td_targets(
        self, batch: EpisodeBatch, shaped: Tensor, roles: Tensor | None = None
    ) -> Tensor:
        """Standalone double-Q target computation for a batch, [B, T]."""
        bt = self.batch_tensors(batch)
        if roles is None:
            roles = self.training_roles(bt)
        roles = roles.detach()
        with torch.no_grad():
            q_online = self._q_rollout(self.utility, bt, roles)
            q_target = self._q_rollout(self.target_utility, bt, roles)
        return self._targets_from(bt, shaped, q_online, q_target)

    def _loss_inputs(
        self,
        bt: dict,
        role_noise: Tensor | None,
        skip_rewards: bool,
    ) -> tuple[Tensor, Tensor | None, dict]:
        """One controller pass drives both the re-sampled roles and the
        intrinsic rewards; reward values are detached constants."""
        stats = {"r_c": 0.0, "r_d": 0.0}
        t1 = bt["features"].shape[1]
        want_rewards = (
            not skip_rewards
            and self.role_mode != "uniform"
            and (self.lambda_c > 0.0 or self.lambda_d > 0.0)
        )

        shaped = None
        if want_rewards:
            t = bt["reward"].shape[1]
            with torch.no_grad():
                r_c_all, r_d_all = self.intrinsic_rewards(bt)
                r_c, r_d = r_c_all[:, :t], r_d_all[:, :t]
                shaped = bt["reward"] + self.lambda_c * r_c + self.lambda_d * r_d
                filled = bt["filled"].to(shaped.dtype)
                denom = filled.sum().clamp_min(1)
                stats["r_c"] = float((r_c * filled).sum() / denom)
                stats["r_d"] = float((r_d * filled).sum() / denom)
        elif not skip_rewards:
            shaped = bt["reward"].clone()

        roles = self.training_roles(bt, role_noise)
        return roles, shaped, stats

    def compute_loss(
        self,
        batch: EpisodeBatch,
        shaped_override: Tensor | None = None,
        role_noise: Tensor | None = None,
        targets_override: Tensor | None = None,
    ) -> tuple[Tensor, dict]:
        """Masked TD loss over a batch.

        The overrides pin quantities the TD loss treats as constants
        (shaped rewards, targets) and the sampling noise, so gradient
        checks can evaluate the loss as a deterministic function of the
        parameters.
        """
        bt = self.batch_tensors(batch)
        roles, shaped, stats = self._loss_inputs(
            bt, role_noise, skip_rewards=shaped_override is not None
        )
        if shaped_override is not None:
            shaped = shaped_override
        q_all = self._q_rollout(self.utility, bt, roles)
        if targets_override is None:
            with torch.no_grad():
                q_target = self._q_rollout(self.target_utility, bt, roles.detach())
            targets = self._targets_from(bt, shaped, q_all.detach(), q_target)
        else:
            targets = targets_override

        chosen = q_all[:, :-1].gather(-1, bt["actions"].unsqueeze(-1)).squeeze(-1)
        chosen = chosen * bt["agent_mask"].unsqueeze(1).to(chosen.dtype)
        qtot = self._mix_steps(self.mixer, chosen, bt, slice(None, -1))

        loss = masked_td_loss(qtot, targets, bt["filled"])
        filled = bt["filled"].to(qtot.dtype)
        with torch.no_grad():
            stats["loss"] = float(loss)
            stats["q_tot_mean"] = float(
                (qtot * filled).sum() / filled.sum().clamp_min(1)
            )
        return loss, stats

    def train_step(self, batch: EpisodeBatch) -> dict:
        loss, stats = self.compute_loss(batch)
        self.opt.zero_grad()
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.params, self.grad_clip)
        self.opt.step()
        self.train_steps += 1
        stats["grad_norm"] = float(grad_norm)
        return stats

    # ---- action selection ----------------------------------------------

    def select_actions(
        self,
        q_values: Tensor,        # [N, A]
        avail: np.ndarray,       # [N, A] bool
        epsilon: float,
        rng: np.random.Generator,
    ) -> np.ndarray:
        """Independent epsilon-greedy per agent, honoring availability."""
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon {epsilon} outside [0, 1]")
        avail_t = torch.as_tensor(avail)
        greedy = masked_argmax(q_values, avail_t).numpy()
        n = greedy.shape[0]
        explore = rng.random(n) < epsilon
        actions = greedy.copy()
        for i in np.flatnonzero(explore):
            options = np.flatnonzero(avail[i])
            actions[i] = options[rng.integers(len(options))]
        return actions

    # ---- target maintenance ---------------------------------------------

    def update_targets(self) -> None:
        self.target_utility.load_state_dict(self.utility.state_dict())
        self.target_mixer.load_state_dict(self.mixer.state_dict())

    def note_episode(self) -> bool:
        """Count one finished training episode; hard-update targets every
        target_period episodes. Returns True when an update happened."""
        self.episodes_seen += 1
        if self.episodes_seen - self.last_target_update_episode >= self.target_period:
            self.update_targets()
            self.last_target_update_episode = self.episodes_seen
            return True
        return False
