"""Tabular off-policy evaluation with multi-step and marginalized TD operators."""

from .envs import ChainSpec, OpenWorldSpec, build_chain, build_open_world
from .mdp import MdpError, Policy, TabularMdp, Trajectory, exact_q, exact_v, random_mdp, random_policy
from .operators import (
    CoverageError,
    SeriesDivergenceError,
    TraceScheme,
    VTraceScheme,
    apply_marginalized,
    apply_multistep,
    global_contraction_rate,
    local_contraction_rates,
    materialize_traces,
    trace_to_weights,
)

__version__ = "0.1.0"

__all__ = [
    "ChainSpec",
    "CoverageError",
    "MdpError",
    "OpenWorldSpec",
    "Policy",
    "SeriesDivergenceError",
    "TabularMdp",
    "TraceScheme",
    "Trajectory",
    "VTraceScheme",
    "apply_marginalized",
    "apply_multistep",
    "build_chain",
    "build_open_world",
    "exact_q",
    "exact_v",
    "global_contraction_rate",
    "local_contraction_rates",
    "materialize_traces",
    "random_mdp",
    "random_policy",
    "trace_to_weights",
]
