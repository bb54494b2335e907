import numpy as np
import pytest
import torch

from cord.controller import RoleController, sample_roles, team_batch
from cord.env import ResourceCollectionEnv, TeamSpec
from cord.rolemath import RoleGaussian

from conftest import manual_obs


def make_controller(seed=0, **kwargs):
    torch.manual_seed(seed)
    defaults = dict(feat_dim=10, n_actions=5, d_role=8, embed_dim=32, n_heads=4)
    defaults.update(kwargs)
    return RoleController(**defaults)


class TestEncodeQuery:
    def test_deterministic_under_fixed_seed(self):
        obs = manual_obs(1, seed=5)
        obs.entity_features[:] = 0.0
        q1 = make_controller(seed=9).encode_query(obs, 0)
        q2 = make_controller(seed=9).encode_query(obs, 0)
        assert torch.equal(q1, q2)
        assert torch.isfinite(q1).all()

    def test_masked_duplicate_row_is_inert(self):
        obs = manual_obs(2, max_agents=4, seed=1)
        q_ref = make_controller().encode_query(obs, 0)
        dup = manual_obs(2, max_agents=4, seed=1)
        # copy agent 0's row into an unused agent slot, leave it masked out
        dup.entity_features[2] = dup.entity_features[0]
        q_dup = make_controller().encode_query(dup, 0)
        assert torch.allclose(q_ref, q_dup, atol=1e-6)

    def test_permuting_other_entities_keeps_query(self):
        obs = manual_obs(2, max_agents=4, n_extra=3, seed=3, full_visibility=False)
        ctrl = make_controller()
        q_ref = ctrl.encode_query(obs, 0)
        perm = np.array([6, 4, 5])  # shuffle the non-agent entity rows
        permuted = manual_obs(2, max_agents=4, n_extra=3, seed=3, full_visibility=False)
        permuted.entity_features[[4, 5, 6]] = obs.entity_features[perm]
        permuted.obs_mask[:, [4, 5, 6]] = obs.obs_mask[:, perm]
        permuted.team_mask[[4, 5, 6]] = obs.team_mask[perm]
        q_perm = ctrl.encode_query(permuted, 0)
        assert torch.allclose(q_ref, q_perm, atol=1e-5)

    def test_missing_agent_raises(self):
        obs = manual_obs(2)
        with pytest.raises(IndexError):
            make_controller().encode_query(obs, 3)


class TestInfluenceVector:
    def test_identical_others_share_weight(self):
        obs = manual_obs(3, max_agents=4, seed=2)
        # make agents 1 and 2 indistinguishable to agent 0
        obs.entity_features[2] = obs.entity_features[1]
        obs.last_actions[2] = obs.last_actions[1]
        obs.last_roles[2] = obs.last_roles[1]
        obs.obs_mask[2] = obs.obs_mask[1]
        bundle = make_controller().influence_vector(obs, 0)
        w = bundle.weights  # [heads, N]
        assert torch.allclose(
            w[:, 1], torch.full_like(w[:, 1], 0.5), atol=1e-6
        )
        assert torch.allclose(
            w[:, 2], torch.full_like(w[:, 2], 0.5), atol=1e-6
        )

    def test_masked_out_agent_gets_zero_weight(self):
        obs = manual_obs(2, max_agents=4, seed=4)
        bundle = make_controller().influence_vector(obs, 0)
        assert (bundle.weights[:, 2:] == 0).all()
        assert (bundle.weights[:, 0] == 0).all()  # self excluded

    def test_influence_within_value_hull(self):
        # per coordinate the influence sits inside [min_j, max_j] of the
        # other agents' values, since each head mixes convexly
        for seed in range(5):
            obs = manual_obs(4, max_agents=4, n_extra=2, seed=seed)
            ctrl = make_controller(seed=seed)
            bundle = ctrl.influence_vector(obs, 0)
            others = bundle.values[1:4]  # existing agents other than 0
            lo = others.min(dim=0).values - 1e-6
            hi = others.max(dim=0).values + 1e-6
            assert bool((bundle.influence >= lo).all())
            assert bool((bundle.influence <= hi).all())

    def test_single_agent_returns_zero_constant(self):
        obs = manual_obs(1)
        bundle = make_controller().influence_vector(obs, 0)
        assert (bundle.weights == 0).all()
        assert (bundle.influence == 0).all()


class TestRoleHeads:
    def test_posterior_deterministic(self):
        obs = manual_obs(3, seed=8)
        a = make_controller(seed=1).posterior(obs, 1)
        b = make_controller(seed=1).posterior(obs, 1)
        assert torch.equal(a.mean, b.mean)
        assert torch.equal(a.log_std, b.log_std)

    def test_log_std_clamped_for_adversarial_inputs(self):
        obs = manual_obs(2, seed=3)
        obs.entity_features *= 1e6
        dist = make_controller().posterior(obs, 0)
        assert bool((dist.log_std >= -5.0).all())
        assert bool((dist.log_std <= 2.0).all())

    def test_posterior_sensitive_to_influence(self):
        # finite-difference gradient of the head output w.r.t. influence
        ctrl = make_controller().double()
        torch.manual_seed(0)
        q = torch.randn(1, ctrl.embed_dim, dtype=torch.float64)
        infl = torch.randn(1, ctrl.embed_dim, dtype=torch.float64)
        eps = 1e-5
        grad_norm = 0.0
        with torch.no_grad():
            for k in range(ctrl.embed_dim):
                up, down = infl.clone(), infl.clone()
                up[0, k] += eps
                down[0, k] -= eps
                hi = ctrl.role_head(q, up).mean.sum()
                lo = ctrl.role_head(q, down).mean.sum()
                grad_norm += float((hi - lo) / (2 * eps)) ** 2
        assert grad_norm ** 0.5 > 1e-3

    def test_single_agent_posterior_equals_baseline(self):
        # with no other agents the influence equals the zero constant
        obs = manual_obs(1, seed=6)
        ctrl = make_controller()
        post = ctrl.posterior(obs, 0)
        base = ctrl.do_baseline(obs, 0)
        assert torch.equal(post.mean, base.mean)
        assert torch.equal(post.log_std, base.log_std)

    def test_baseline_head_ignores_influence_argument(self):
        ctrl = make_controller().double()
        q = torch.randn(3, ctrl.embed_dim, dtype=torch.float64)
        a = ctrl.role_head(q, None)
        b = ctrl.role_head(q, torch.zeros(3, ctrl.embed_dim, dtype=torch.float64))
        assert torch.equal(a.mean, b.mean)
        assert torch.equal(a.log_std, b.log_std)


class TestSampleRoles:
    def test_mean_mode_returns_mean(self):
        dist = RoleGaussian(torch.randn(3, 8), torch.randn(3, 8).clamp(-2, 0))
        assert torch.equal(sample_roles(dist, "mean"), dist.mean)

    def test_zero_std_limit(self):
        dist = RoleGaussian(torch.randn(4, 8), torch.full((4, 8), -40.0))
        out = sample_roles(dist, "stochastic", torch.Generator().manual_seed(0))
        assert torch.allclose(out, dist.mean, atol=1e-12)

    def test_empirical_mean_matches(self):
        gen = torch.Generator().manual_seed(7)
        mu, sigma = 0.7, 0.9
        dist = RoleGaussian(
            torch.full((100_000, 1), mu), torch.full((100_000, 1), np.log(sigma))
        )
        draws = sample_roles(dist, "stochastic", gen)
        bound = 3 * sigma / np.sqrt(100_000)
        assert abs(float(draws.mean()) - mu) < bound

    def test_unknown_mode_raises(self):
        dist = RoleGaussian(torch.zeros(1, 2), torch.zeros(1, 2))
        with pytest.raises(ValueError):
            sample_roles(dist, "nope")


class TestForwardInvariants:
    def test_attention_normalization_randomized(self):
        for seed in range(8):
            obs = manual_obs(
                int(np.random.default_rng(seed).integers(1, 5)),
                seed=seed,
                full_visibility=False,
            )
            ctrl = make_controller(seed=seed)
            ctrl(team_batch([obs]), check=True)  # raises on violation

    def test_permutation_equivariance_over_agents(self):
        obs = manual_obs(4, max_agents=4, n_extra=2, seed=11)
        ctrl = make_controller().double()
        out = ctrl(team_batch([obs]))
        perm = np.array([2, 0, 3, 1])
        permuted = manual_obs(4, max_agents=4, n_extra=2, seed=11)
        permuted.entity_features[:4] = obs.entity_features[perm]
        permuted.obs_mask = obs.obs_mask[perm][:, list(perm) + [4, 5]]
        permuted.team_mask[:4] = obs.team_mask[perm]
        permuted.last_actions = obs.last_actions[perm]
        permuted.last_roles = obs.last_roles[perm]
        out_p = ctrl(team_batch([permuted]))
        perm_t = torch.as_tensor(perm)
        assert torch.allclose(out_p.query[0], out.query[0, perm_t], atol=1e-10)
        assert torch.allclose(
            out_p.influence[0], out.influence[0, perm_t], atol=1e-10
        )
        assert torch.allclose(
            out_p.posterior.mean[0], out.posterior.mean[0, perm_t], atol=1e-10
        )
        assert torch.allclose(
            out_p.posterior.log_std[0],
            out.posterior.log_std[0, perm_t],
            atol=1e-10,
        )

    def test_variable_team_sizes_all_valid(self):
        env = ResourceCollectionEnv()
        ctrl = RoleController(env.feat_dim, env.n_actions)
        for n in range(1, 9):
            obs = env.reset(TeamSpec(n_agents=n, seed=n))
            out = ctrl(team_batch([obs]), check=True)
            assert torch.isfinite(out.posterior.mean).all()
            assert torch.isfinite(out.posterior.log_std).all()

    def test_padding_content_never_leaks(self):
        obs = manual_obs(2, max_agents=4, n_extra=2, seed=13)
        ctrl = make_controller()
        ref = ctrl(team_batch([obs]))
        junk = manual_obs(2, max_agents=4, n_extra=2, seed=13)
        junk.entity_features[2:4] = 77.0  # garbage in masked agent slots
        junk.last_actions[2:] = 5.0
        junk.last_roles[2:] = -9.0
        out = ctrl(team_batch([junk]))
        assert torch.allclose(ref.query, out.query, atol=0)
        assert torch.allclose(ref.posterior.mean, out.posterior.mean, atol=0)
        assert torch.allclose(ref.influence, out.influence, atol=0)

    def test_gradients_match_finite_differences(self):
        # backprop vs central differences through the full encoder stack
        obs = manual_obs(3, max_agents=4, n_extra=2, seed=17)
        ctrl = make_controller(embed_dim=16, n_heads=2).double()
        batch = team_batch([obs])

        def scalar_output():
            out = ctrl(batch)
            return out.posterior.mean.sum() + out.posterior.log_std.sum()

        loss = scalar_output()
        ctrl.zero_grad()
        loss.backward()
        rng = np.random.default_rng(0)
        eps = 1e-6
        worst = 0.0
        for name, param in ctrl.named_parameters():
            grad = param.grad
            if grad is None:
                continue
            flat = param.data.view(-1)
            idxs = rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False)
            for idx in idxs:
                orig = float(flat[idx])
                flat[idx] = orig + eps
                hi = float(scalar_output())
                flat[idx] = orig - eps
                lo = float(scalar_output())
                flat[idx] = orig
                fd = (hi - lo) / (2 * eps)
                an = float(grad.view(-1)[idx])
                denom = max(abs(fd), abs(an), 1e-8)
                worst = max(worst, abs(fd - an) / denom)
        assert worst < 1e-4
