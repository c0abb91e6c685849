"""Energy ledger for one decode step: tier-path access, GPU compute, background."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import ClusterConfig, ModelConfig, Placement, Scenario
from .expert_stats import ActivationStats, scenario_activation
from .perf_model import LatencyBreakdown, LayerClass, LayerWork, decode_latency

PJ = 1e-12
BITS = 8

# Monte Carlo trials behind each evaluate(); enough for a <0.5% CI on the busiest-GPU count
EVAL_TRIALS = 4096


@dataclass(frozen=True)
class PathLeg:
    tier: Placement
    direction: str
    energy: float


@dataclass(frozen=True)
class AccessPath:
    source: Placement
    legs: tuple[PathLeg, ...]

    @property
    def total_energy(self) -> float:
        return math.fsum(leg.energy for leg in self.legs)


def access_path(placement: Placement | str, cluster: ClusterConfig, flash_scale: float = 1.0) -> AccessPath:
    """pJ/bit to make one bit of weights computable from ``placement``.

    Offloaded data is read from its tier, written into HBM, then read from
    HBM by the kernels.
    """
    placement = Placement.parse(placement)
    hbm = cluster.gpu.hbm
    hbm_read = PathLeg(Placement.DEVICE_MEMORY, "read", hbm.read_energy)
    if placement is Placement.DEVICE_MEMORY:
        return AccessPath(placement, (hbm_read,))
    src = cluster.tier(placement)
    first = src.read_energy * (flash_scale if placement is Placement.SSD else 1.0)
    return AccessPath(placement, (
        PathLeg(placement, "read", first),
        PathLeg(Placement.DEVICE_MEMORY, "write", hbm.write_energy),
        hbm_read,
    ))


@dataclass
class EnergyBreakdown:
    access_energy_by_class: dict[str, float]
    access_energy_by_path: dict[str, float]
    compute_energy: float
    compute_energy_by_class: dict[str, float]
    background_energy: float
    batch_size: int
    total: float = field(init=False)
    per_token: float = field(init=False)

    def __post_init__(self) -> None:
        self.total = math.fsum([self.access_energy, self.compute_energy, self.background_energy])
        self.per_token = self.total / self.batch_size

    @property
    def access_energy(self) -> float:
        return math.fsum(self.access_energy_by_class.values())

    @property
    def moe_access_share(self) -> float:
        """Share of total energy spent moving gated-expert data."""
        return self.access_energy_by_class.get(LayerClass.MOE_GATED_EXPERTS.value, 0.0) / self.total

    def moe_access_per_token(self) -> float:
        return self.access_energy_by_class.get(LayerClass.MOE_GATED_EXPERTS.value, 0.0) / self.batch_size


def _offload_bytes(work: LayerWork, stats: ActivationStats | None, model: ModelConfig) -> float:
    if work.layer_class is not LayerClass.MOE_GATED_EXPERTS or stats is None:
        return 0.0
    return stats.expected_unique * model.expert_params * model.bytes_per_param


def access_energy(
    works: list[LayerWork],
    paths: dict[Placement, AccessPath],
    cluster: ClusterConfig,
    offload_bytes: list[float] | None = None,
) -> tuple[dict[str, float], dict[str, float]]:
    """Joules by layer class and by path.

    All HBM traffic pays the HBM read leg. ``offload_bytes[i]`` of layer i
    additionally pay the rest of that layer's source path (tier read and HBM
    write). Collective traffic pays link energy.
    """
    offload_bytes = offload_bytes or [0.0] * len(works)
    hbm_read = cluster.gpu.hbm.read_energy
    link = cluster.interconnect
    by_class: dict[str, list[float]] = {c.value: [] for c in LayerClass}
    by_path: dict[str, list[float]] = {"DeviceMemory": [], "CpuMemory": [], "Ssd": [], "GpuLink": [], "InterNode": []}
    for work, extra in zip(works, offload_bytes):
        parts = by_class[work.layer_class.value]
        if work.hbm_bytes:
            e = work.hbm_bytes * BITS * hbm_read * PJ
            parts.append(e)
            by_path["DeviceMemory"].append(e)
        if extra:
            path = paths[work.source_tier]
            for leg in path.legs[:-1]:
                e = extra * BITS * leg.energy * PJ
                parts.append(e)
                by_path[leg.tier.value if leg.direction == "read" else "DeviceMemory"].append(e)
        if work.comm_bytes:
            intra = work.comm_bytes - work.internode_bytes
            e_intra = intra * BITS * link.gpu_link_energy * PJ
            e_inter = work.internode_bytes * BITS * link.internode_energy * PJ
            parts += [e_intra, e_inter]
            by_path["GpuLink"].append(e_intra)
            by_path["InterNode"].append(e_inter)
    return ({k: math.fsum(v) for k, v in by_class.items()},
            {k: math.fsum(v) for k, v in by_path.items()})


def compute_energy(works: list[LayerWork], cluster: ClusterConfig, bytes_per_param: int = 2) -> dict[str, float]:
    """MAC energy plus on-chip operand traffic, per layer class (J)."""
    gpu = cluster.gpu
    per_mac = gpu.mac_energy + gpu.cache_traffic_multiplier * bytes_per_param * BITS * gpu.cache_energy
    by_class: dict[str, list[float]] = {c.value: [] for c in LayerClass}
    for work in works:
        if work.flops:
            by_class[work.layer_class.value].append(work.flops / 2 * per_mac * PJ)
    return {k: math.fsum(v) for k, v in by_class.items()}


def background_power(cluster: ClusterConfig) -> float:
    """Watts drawn regardless of activity: GPU idle plus DRAM static power."""
    per_gpu = (cluster.gpu.idle_power
               + cluster.gpu.hbm.static_power_per_capacity * cluster.gpu.hbm.capacity_per_gpu
               + cluster.cpu_memory.static_power_per_capacity * cluster.cpu_memory.capacity_per_gpu)
    return cluster.n_gpus * per_gpu


def background_energy(latency: float, cluster: ClusterConfig) -> float:
    if latency < 0:
        raise ValueError("latency must be >= 0")
    return latency * background_power(cluster)


def _flatten(works, head) -> list[LayerWork]:
    flat = [w for dec in works for w in dec.layers]
    flat += [dec.transfer for dec in works if dec.transfer is not None]
    if head is not None:
        flat.append(head)
    return flat


def evaluate(
    scenario: Scenario,
    trials: int = EVAL_TRIALS,
    overlap_fraction: float = 1.0,
    stats: ActivationStats | None = None,
) -> tuple[LatencyBreakdown, EnergyBreakdown]:
    """Run routing statistics, the latency timeline and the energy ledger for one scenario."""
    model, cluster = scenario.model, scenario.cluster
    if stats is None and model.n_moe_decoders:
        stats = scenario_activation(scenario, trials)
    latency, works, head = decode_latency(scenario, stats, overlap_fraction)
    flat = [w for w in _flatten(works, head) if w.layer_class is not LayerClass.PREFETCH_TRANSFER]
    paths = {p: access_path(p, cluster, scenario.flash_read_energy_scale) for p in Placement}
    extra = [_offload_bytes(w, stats, model) for w in flat]
    by_class, by_path = access_energy(flat, paths, cluster, extra)
    comp = compute_energy(flat, cluster, model.bytes_per_param)
    energy = EnergyBreakdown(
        access_energy_by_class=by_class,
        access_energy_by_path=by_path,
        compute_energy=math.fsum(comp.values()),
        compute_energy_by_class=comp,
        background_energy=background_energy(latency.token_step_latency, cluster),
        batch_size=scenario.batch_size,
    )
    return latency, energy
