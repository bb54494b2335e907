"""Distribution-level math for role assignment.

Diagonal Gaussians over role space, closed-form KL divergences, the
pairwise affinity matrix built from symmetrized KLs, the determinant
diversity score, differential entropies, and reward shaping.

All functions are pure and broadcast over arbitrary leading batch
dimensions; the role dimension is always the trailing axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

# H(N(mu, sigma^2)) = 0.5*log(2*pi*e) + log(sigma) per dimension
_HALF_LOG_2PI_E = 0.5 * (math.log(2.0 * math.pi) + 1.0)


class ContractViolation(ValueError):
    """Raised when an input breaks a documented precondition."""


@dataclass(frozen=True)
class RoleGaussian:
    """Diagonal Gaussian over role space.

    mean and log_std share a common shape [..., d]; leading dimensions
    batch over agents and/or timesteps.
    """

    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ContractViolation(
                f"mean shape {tuple(self.mean.shape)} != log_std shape "
                f"{tuple(self.log_std.shape)}"
            )

    @property
    def d_role(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()

    def __getitem__(self, idx) -> "RoleGaussian":
        return RoleGaussian(self.mean[idx], self.log_std[idx])

    def validate(self) -> None:
        if not bool(torch.isfinite(self.mean).all()) or not bool(
            torch.isfinite(self.log_std).all()
        ):
            raise ContractViolation("non-finite Gaussian parameters")

    def log_prob(self, x: Tensor) -> Tensor:
        """Log density at x, summed over the role dimension."""
        z = (x - self.mean) * torch.exp(-self.log_std)
        return (-0.5 * z * z - self.log_std - _HALF_LOG_2PI_E).sum(dim=-1)

    def sample(self, generator: torch.Generator | None = None) -> Tensor:
        """Reparameterized draw mean + std * eps, eps ~ N(0, I)."""
        eps = torch.randn(
            self.mean.shape, generator=generator, dtype=self.mean.dtype
        )
        return self.mean + self.std * eps


def stack_gaussians(gaussians: list[RoleGaussian], dim: int = 0) -> RoleGaussian:
    return RoleGaussian(
        torch.stack([g.mean for g in gaussians], dim=dim),
        torch.stack([g.log_std for g in gaussians], dim=dim),
    )


def _check_pair(p: RoleGaussian, q: RoleGaussian) -> None:
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ContractViolation(
            f"role dimension mismatch: {p.mean.shape[-1]} vs {q.mean.shape[-1]}"
        )
    p.validate()
    q.validate()


def gaussian_kl(p: RoleGaussian, q: RoleGaussian) -> Tensor:
    """KL(p || q) between diagonal Gaussians, summed over dimensions.

    Per dimension: log(s_q/s_p) + (s_p^2 + (m_p - m_q)^2) / (2 s_q^2) - 1/2.
    """
    _check_pair(p, q)
    var_ratio = torch.exp(2.0 * (p.log_std - q.log_std))
    scaled_sq = (p.mean - q.mean) ** 2 * torch.exp(-2.0 * q.log_std)
    per_dim = q.log_std - p.log_std + 0.5 * (var_ratio + scaled_sq) - 0.5
    # exact formula is >= 0; clamp the ~1 ulp negatives at p == q
    return per_dim.sum(dim=-1).clamp_min(0.0)


def symmetric_kl(p: RoleGaussian, q: RoleGaussian) -> Tensor:
    """KL(p || q) + KL(q || p); symmetric in its arguments."""
    return gaussian_kl(p, q) + gaussian_kl(q, p)


@dataclass(frozen=True)
class AffinityMatrix:
    """Pairwise role affinity exp(-symmetric KL), shape [..., N, N].

    Symmetric, unit diagonal, entries in (0, 1].
    """

    entries: Tensor
    agent_count: int

    def validate(self, atol: float = 0.0) -> None:
        e = self.entries
        if e.shape[-1] != self.agent_count or e.shape[-2] != self.agent_count:
            raise ContractViolation("entries not square in agent_count")
        if not bool((e == e.transpose(-1, -2)).all()):
            raise ContractViolation("affinity matrix not symmetric")
        diag = e.diagonal(dim1=-2, dim2=-1)
        if not bool((diag == 1.0).all()):
            raise ContractViolation("affinity diagonal != 1")
        if not bool(((e > 0.0) & (e <= 1.0 + atol)).all()):
            raise ContractViolation("affinity entries outside (0, 1]")


def affinity_matrix(
    posteriors: list[RoleGaussian] | RoleGaussian,
    agent_mask: Tensor | None = None,
) -> AffinityMatrix:
    """Build the affinity matrix A with A[i, j] = exp(-symmetric_kl(i, j)).

    posteriors is either a list of N per-agent Gaussians or a stacked
    RoleGaussian with shape [..., N, d]. With agent_mask [..., N], rows
    and columns of masked-out agents are replaced by identity rows so the
    determinant over the padded matrix equals the determinant over the
    existing agents only.
    """
    if isinstance(posteriors, list):
        if len(posteriors) == 0:
            raise ContractViolation("affinity_matrix of an empty posterior list")
        posteriors = stack_gaussians(posteriors, dim=-2)
    if posteriors.mean.ndim < 2 or posteriors.mean.shape[-2] < 1:
        raise ContractViolation("need at least one agent")
    n = posteriors.mean.shape[-2]
    p_i = RoleGaussian(
        posteriors.mean.unsqueeze(-2), posteriors.log_std.unsqueeze(-2)
    )
    p_j = RoleGaussian(
        posteriors.mean.unsqueeze(-3), posteriors.log_std.unsqueeze(-3)
    )
    kl = gaussian_kl(p_i, p_j)  # [..., N, N]
    dist = kl + kl.transpose(-1, -2)  # exactly symmetric
    eye = torch.eye(n, dtype=torch.bool, device=dist.device)
    dist = dist.masked_fill(eye, 0.0)  # d_ii = 0 exactly
    entries = torch.exp(-dist)
    if agent_mask is not None:
        pair_ok = agent_mask.unsqueeze(-1) & agent_mask.unsqueeze(-2)
        entries = torch.where(pair_ok | eye, entries, torch.zeros_like(entries))
        entries = torch.where(
            eye.expand_as(entries), torch.ones_like(entries), entries
        )
    return AffinityMatrix(entries=entries, agent_count=n)


def diversity_reward(a: AffinityMatrix) -> Tensor:
    """Determinant of the affinity matrix, clamped below at 0.

    0 when roles are fully redundant, approaches 1 as all pairwise
    symmetric KLs diverge. Negative determinants (the matrix is not
    guaranteed positive semidefinite) count as maximal redundancy.
    """
    return torch.linalg.det(a.entries).clamp_min(0.0)


def causal_reward(
    posteriors: RoleGaussian | list[RoleGaussian],
    baselines: RoleGaussian | list[RoleGaussian],
    agent_mask: Tensor | None = None,
) -> Tensor:
    """Mean over samples of the per-agent KL(posterior || do-baseline) sums.

    posteriors and baselines are aligned [M, N, d] stacks (or lists of
    per-sample [N, d] Gaussians); agent_mask [M, N] excludes padded agents.
    """
    if isinstance(posteriors, list):
        posteriors = stack_gaussians(posteriors, dim=0)
    if isinstance(baselines, list):
        baselines = stack_gaussians(baselines, dim=0)
    if posteriors.mean.shape != baselines.mean.shape:
        raise ContractViolation(
            f"posteriors {tuple(posteriors.mean.shape)} and baselines "
            f"{tuple(baselines.mean.shape)} misaligned"
        )
    if posteriors.mean.ndim < 3:
        raise ContractViolation("expected [M, N, d] stacked Gaussians")
    kl = gaussian_kl(posteriors, baselines)  # [M, N]
    if agent_mask is not None:
        kl = kl * agent_mask.to(kl.dtype)
    return kl.sum(dim=-1).mean(dim=0)


def gaussian_entropy(p: RoleGaussian) -> Tensor:
    """Differential entropy of the diagonal Gaussian, in nats."""
    p.validate()
    return (p.log_std + _HALF_LOG_2PI_E).sum(dim=-1)


def shape_reward(
    r_e: float, r_c: float, r_d: float, lambda_c: float, lambda_d: float
) -> float:
    """r = r_e + lambda_c * r_c + lambda_d * r_d."""
    vals = (r_e, r_c, r_d, lambda_c, lambda_d)
    if not all(math.isfinite(v) for v in vals):
        raise ContractViolation(f"non-finite reward inputs {vals}")
    if lambda_c < 0 or lambda_d < 0:
        raise ContractViolation("reward weights must be non-negative")
    return r_e + lambda_c * r_c + lambda_d * r_d
