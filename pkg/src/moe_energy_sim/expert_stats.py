"""Expert-activation statistics under uniform token-to-expert routing.

Each token picks ``top_k`` distinct experts uniformly at random; tokens are
independent. Experts are laid out contiguously across GPUs (expert
parallelism), ``n_ex // n_gpus`` per GPU.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

from .config import Scenario

if os.environ.get("MOE_ENERGY_SIM_PURE_PYTHON"):
    from . import _kernels_py as _kernels

    BACKEND = "numpy"
else:
    try:
        from . import _kernels  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _kernels

        BACKEND = "numpy"

DEFAULT_TRIALS = 100_000


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationStats:
    expected_unique: float
    expected_max_per_gpu: float
    per_gpu_token_load_max: float
    sample_count: int
    rng_seed: int
    ci95_halfwidth: float
    max_per_gpu_ci95_halfwidth: float = 0.0


def _check(n_ex: int, top_k: int, b: int) -> None:
    if top_k > n_ex:
        raise DomainError("top_k exceeds N_ex")
    if n_ex < 0 or top_k < 0 or b < 0:
        raise DomainError("counts must be non-negative")


def expected_unique_experts(n_ex: int, top_k: int, b: float) -> float:
    """Exact E[#distinct experts hit] for ``b`` tokens choosing ``top_k`` of ``n_ex``."""
    _check(n_ex, top_k, 0)
    if b < 0:
        raise DomainError("counts must be non-negative")
    if n_ex == 0 or b == 0:
        return 0.0
    miss = (n_ex - top_k) / n_ex
    return n_ex * -math.expm1(b * math.log(miss)) if miss > 0 else float(n_ex)


def _ci(total: int, total_sq: int, n: int) -> float:
    if n < 2:
        return 0.0
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return 1.96 * math.sqrt(var / n)


def sample_activation(
    n_ex: int,
    top_k: int,
    b: int,
    n_gpus: int,
    seed: int = 0,
    trials: int = DEFAULT_TRIALS,
) -> ActivationStats:
    """Seeded Monte Carlo over one decoder's routing for a batch of ``b`` tokens."""
    _check(n_ex, top_k, b)
    if n_gpus < 1 or n_ex % n_gpus:
        raise DomainError(f"{n_ex} experts do not divide evenly across {n_gpus} GPUs")
    if trials < 1:
        raise DomainError("trials must be >= 1")
    seed &= 0xFFFFFFFFFFFFFFFF
    su, su2, sm, sm2, sl = _kernels.sample_sums(n_ex, top_k, b, n_gpus, seed, trials)
    return ActivationStats(
        expected_unique=su / trials,
        expected_max_per_gpu=sm / trials,
        per_gpu_token_load_max=sl / trials,
        sample_count=trials,
        rng_seed=seed,
        ci95_halfwidth=_ci(su, su2, trials),
        max_per_gpu_ci95_halfwidth=_ci(sm, sm2, trials),
    )


def scenario_activation(scenario: Scenario, trials: int = DEFAULT_TRIALS) -> ActivationStats:
    m = scenario.model
    return sample_activation(
        m.n_gated_experts, m.top_k, scenario.batch_size, scenario.cluster.n_gpus,
        seed=scenario.seed, trials=trials,
    )


def activation_ratio_sum(scenario: Scenario, seed: int | None = None, trials: int = DEFAULT_TRIALS) -> float:
    """Summed busiest-GPU active experts over decoders, relative to full activation.

    Decoders are i.i.d. under uniform routing, so the per-decoder sums
    reduce to one expectation scaled by the decoder count on both sides.
    """
    m = scenario.model
    if m.n_moe_decoders < 1:
        raise DomainError("scenario has no MoE decoders")
    if seed is not None:
        scenario = scenario.replace(seed=seed)
    stats = scenario_activation(scenario, trials)
    per_gpu = m.n_gated_experts / scenario.cluster.n_gpus
    return (m.n_moe_decoders * stats.expected_max_per_gpu) / (m.n_moe_decoders * per_gpu)
