from .disaster import (
    PRIORITIES,
    ClusterSpec,
    DisasterConfig,
    DisasterSimulator,
    EnvironmentSizeError,
    PriorityRule,
    build_disaster_mdp,
    feasible_actions,
    generate_disaster_policies,
    generate_rules,
    load_clusters,
)
from .random_mdp import random_mdp, random_policies

__all__ = [
    "PRIORITIES",
    "ClusterSpec",
    "DisasterConfig",
    "DisasterSimulator",
    "EnvironmentSizeError",
    "PriorityRule",
    "build_disaster_mdp",
    "feasible_actions",
    "generate_disaster_policies",
    "generate_rules",
    "load_clusters",
    "random_mdp",
    "random_policies",
]
