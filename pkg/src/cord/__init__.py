"""Hierarchical cooperative MARL with role diversity.

A high-level controller assigns latent roles to low-level agents by
attending over the rest of the team; two intrinsic rewards derived from
an entropy decomposition (a causal-influence term and a determinant
diversity term) shape the shared reward of a QMIX-style value learner.
Ships with a resource-collection gridworld, generalization-test
protocols, ablations, and numerical diagnostics.
"""

from .config import ExperimentConfig, load_config
from .controller import InfluenceBundle, RoleController, sample_roles, team_batch
from .env import ResourceCollectionEnv, TeamSpec, builtin_action
from .learner import AttentionMixer, Learner, UtilityNet
from .obs import EntityObservation
from .replay import EpisodeBatch, EpisodeRecorder, ReplayBuffer
from .rolemath import (
    AffinityMatrix,
    ContractViolation,
    RoleGaussian,
    affinity_matrix,
    causal_reward,
    diversity_reward,
    gaussian_entropy,
    gaussian_kl,
    shape_reward,
    symmetric_kl,
)
from .runner import (
    TrainingRun,
    eval_unseen_agents,
    eval_unseen_teams,
    run_training,
)

__all__ = [
    "AffinityMatrix",
    "AttentionMixer",
    "ContractViolation",
    "EntityObservation",
    "EpisodeBatch",
    "EpisodeRecorder",
    "ExperimentConfig",
    "InfluenceBundle",
    "Learner",
    "ReplayBuffer",
    "ResourceCollectionEnv",
    "RoleController",
    "RoleGaussian",
    "TeamSpec",
    "TrainingRun",
    "UtilityNet",
    "affinity_matrix",
    "builtin_action",
    "causal_reward",
    "diversity_reward",
    "eval_unseen_agents",
    "eval_unseen_teams",
    "gaussian_entropy",
    "gaussian_kl",
    "load_config",
    "run_training",
    "sample_roles",
    "shape_reward",
    "symmetric_kl",
    "team_batch",
]
