"""Analytical energy and latency model of MoE decode with offloaded expert weights."""

__version__ = "0.1.0"

from .config import (
    ClusterConfig,
    ConfigError,
    ModelConfig,
    Placement,
    Scenario,
    load_cluster,
    load_model,
    load_scenario,
    param_count,
)
from .energy_model import EnergyBreakdown, access_path, evaluate
from .expert_stats import BACKEND, ActivationStats, DomainError, expected_unique_experts, sample_activation
from .perf_model import LatencyBreakdown, LayerClass

__all__ = [
    "ActivationStats",
    "BACKEND",
    "ClusterConfig",
    "ConfigError",
    "DomainError",
    "EnergyBreakdown",
    "LatencyBreakdown",
    "LayerClass",
    "ModelConfig",
    "Placement",
    "Scenario",
    "access_path",
    "evaluate",
    "expected_unique_experts",
    "load_cluster",
    "load_model",
    "load_scenario",
    "param_count",
    "sample_activation",
]
