"""Synthetic network-analytic problems with exact oracles."""

from .diffusion import DiffusionSpec, diffusion_oracle, generate_diffusion, throat_conductance
from .gvi import (
    GviSpec,
    generate_gvi,
    greedy_policy,
    greedy_policy_edges,
    policy_iteration_oracle,
    value_iteration_oracle,
)

__all__ = [
    "DiffusionSpec",
    "GviSpec",
    "diffusion_oracle",
    "generate_diffusion",
    "generate_gvi",
    "greedy_policy",
    "greedy_policy_edges",
    "policy_iteration_oracle",
    "throat_conductance",
    "value_iteration_oracle",
]
