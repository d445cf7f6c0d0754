"""Iterative MPC with distributionally robust, CVaR-based obstacle avoidance."""

from .clustering import ClusteredDistribution, cluster, inflated_ambiguity
from .config import RunConfig, parse_config
from .errors import (
    ConfigurationError,
    DrmpcError,
    InfeasibleError,
    InputError,
    NonConvergenceError,
    NumericalError,
    SafeSetError,
)
from .experiment import build_problem, initial_robust_trajectory, run_iterations
from .geometry import ObstacleModel, Polytope, constraint_g
from .mpc import SafetySetSpec, safe_mpc_rollout, solve_finite_horizon
from .risk import AmbiguitySet, DiscreteDistribution, cvar_discrete, worst_case_cvar_ub
from .safeset import SampledSafeSet, append_trajectory, min_cost_map, prune

__all__ = [
    "AmbiguitySet",
    "ClusteredDistribution",
    "ConfigurationError",
    "DiscreteDistribution",
    "DrmpcError",
    "InfeasibleError",
    "InputError",
    "NonConvergenceError",
    "NumericalError",
    "ObstacleModel",
    "Polytope",
    "RunConfig",
    "SafeSetError",
    "SafetySetSpec",
    "SampledSafeSet",
    "append_trajectory",
    "build_problem",
    "cluster",
    "constraint_g",
    "cvar_discrete",
    "inflated_ambiguity",
    "initial_robust_trajectory",
    "min_cost_map",
    "parse_config",
    "prune",
    "run_iterations",
    "safe_mpc_rollout",
    "solve_finite_horizon",
    "worst_case_cvar_ub",
]
