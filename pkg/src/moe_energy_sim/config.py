"""Input domain types, validation, and JSON loading for decode-step scenarios."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1
GB = 1e9


class ConfigError(ValueError):
    """Raised when a configuration file is malformed or violates an invariant."""


class Placement(str, Enum):
    DEVICE_MEMORY = "DeviceMemory"
    CPU_MEMORY = "CpuMemory"
    SSD = "Ssd"

    @classmethod
    def parse(cls, value: str | Placement) -> Placement:
        if isinstance(value, Placement):
            return value
        aliases = {"hbm": cls.DEVICE_MEMORY, "ddr": cls.CPU_MEMORY, "ssd": cls.SSD}
        key = str(value)
        if key.lower() in aliases:
            return aliases[key.lower()]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown placement {value!r}") from None

    @property
    def short(self) -> str:
        return {"DeviceMemory": "hbm", "CpuMemory": "ddr", "Ssd": "ssd"}[self.value]


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass(frozen=True)
class MemoryTier:
    """One level of the memory hierarchy, as seen from a single GPU.

    Energies are pJ/bit including the external I/O path; bandwidths are
    bytes/s available to one GPU; static power is W per byte installed.
    """

    name: Placement
    read_energy: float
    write_energy: float
    read_bandwidth: float
    write_bandwidth: float
    static_power_per_capacity: float
    capacity_per_gpu: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "name", Placement.parse(self.name))
        for attr in ("read_energy", "write_energy", "read_bandwidth", "write_bandwidth"):
            _require(getattr(self, attr) > 0, f"{self.name.value}.{attr} must be positive")
        _require(self.static_power_per_capacity >= 0, f"{self.name.value}.static_power_per_capacity must be >= 0")
        _require(self.capacity_per_gpu >= 0, f"{self.name.value}.capacity_per_gpu must be >= 0")
        if self.name is Placement.SSD:
            _require(self.static_power_per_capacity == 0, "Ssd.static_power_per_capacity must be 0")


@dataclass(frozen=True)
class InterconnectSpec:
    gpu_link_bandwidth: float
    gpu_link_energy: float
    internode_port_bandwidth: float
    internode_port_count: int
    internode_energy: float

    def __post_init__(self) -> None:
        _require(self.gpu_link_bandwidth > 0, "gpu_link_bandwidth must be positive")
        _require(self.internode_port_bandwidth > 0, "internode_port_bandwidth must be positive")
        _require(self.internode_port_count >= 1, "internode_port_count must be >= 1")
        _require(self.gpu_link_energy >= 0 and self.internode_energy >= 0, "link energies must be >= 0")

    @property
    def internode_bandwidth(self) -> float:
        """Aggregate per-node inter-node bandwidth, one direction."""
        return self.internode_port_bandwidth * self.internode_port_count


@dataclass(frozen=True)
class GpuSpec:
    peak_flops: float
    mac_energy: float
    cache_energy: float
    idle_power: float
    hbm: MemoryTier
    # on-chip operand traffic per MAC, as a multiple of bytes_per_param
    cache_traffic_multiplier: float = 2.0

    def __post_init__(self) -> None:
        for attr in ("peak_flops", "mac_energy", "cache_energy", "idle_power"):
            _require(getattr(self, attr) > 0, f"gpu.{attr} must be positive")
        _require(self.cache_traffic_multiplier >= 0, "gpu.cache_traffic_multiplier must be >= 0")
        _require(self.hbm.name is Placement.DEVICE_MEMORY, "gpu.hbm must be the DeviceMemory tier")


@dataclass(frozen=True)
class ModelConfig:
    """Decoder-only transformer, optionally with MoE decoders.

    ``kv_width_per_token`` is bytes of KV cache per token per decoder.
    ``attention_params`` overrides the per-decoder attention weight count
    for attention variants the head-based formula does not describe.
    """

    name: str
    d_model: int
    n_heads: int
    d_head: int
    n_kv_heads: int
    kv_width_per_token: float
    n_ffn_decoders: int
    n_moe_decoders: int
    ffn_inner_dim: int
    expert_inner_dim: int
    n_gated_experts: int
    n_shared_experts: int
    top_k: int
    bytes_per_param: int = 2
    vocab_size: int = 0
    attention_params: int | None = None
    interleaved: bool = False

    def __post_init__(self) -> None:
        counts = (
            "d_model", "n_heads", "d_head", "n_kv_heads", "n_ffn_decoders", "n_moe_decoders",
            "ffn_inner_dim", "expert_inner_dim", "n_gated_experts", "n_shared_experts", "top_k",
            "vocab_size",
        )
        for attr in counts:
            _require(getattr(self, attr) >= 0, f"{attr} must be non-negative")
        _require(self.bytes_per_param > 0, "bytes_per_param must be positive")
        _require(self.kv_width_per_token >= 0, "kv_width_per_token must be non-negative")
        _require(self.top_k <= self.n_gated_experts, "top_k exceeds N_ex")
        if self.n_moe_decoders:
            _require(self.top_k >= 1, "MoE decoders need top_k >= 1")
        if self.attention_params is not None:
            _require(self.attention_params >= 0, "attention_params must be non-negative")

    @property
    def n_decoders(self) -> int:
        return self.n_ffn_decoders + self.n_moe_decoders

    @property
    def attention_params_per_decoder(self) -> int:
        if self.attention_params is not None:
            return self.attention_params
        q_o = 2 * self.d_model * self.n_heads * self.d_head
        k_v = 2 * self.d_model * self.n_kv_heads * self.d_head
        return q_o + k_v

    @property
    def ffn_params(self) -> int:
        # gate, up and down projections
        return 3 * self.d_model * self.ffn_inner_dim

    @property
    def expert_params(self) -> int:
        return 3 * self.d_model * self.expert_inner_dim

    @property
    def gate_params(self) -> int:
        return self.d_model * self.n_gated_experts

    def decoder_kinds(self) -> list[str]:
        """Decoder order as ``"ffn"``/``"moe"`` labels.

        Dense decoders lead unless ``interleaved``, in which case the two
        kinds alternate starting with a dense decoder.
        """
        if not self.interleaved:
            return ["ffn"] * self.n_ffn_decoders + ["moe"] * self.n_moe_decoders
        kinds: list[str] = []
        f, m = self.n_ffn_decoders, self.n_moe_decoders
        while f or m:
            if f:
                kinds.append("ffn")
                f -= 1
            if m:
                kinds.append("moe")
                m -= 1
        return kinds


@dataclass(frozen=True)
class ParamBreakdown:
    attention: int
    ffn: int
    gate: int
    shared_experts: int
    gated_experts: int
    embedding: int

    @property
    def total(self) -> int:
        return (self.attention + self.ffn + self.gate + self.shared_experts
                + self.gated_experts + self.embedding)

    @property
    def expert_share(self) -> float:
        """Gated plus shared expert weights as a fraction of all weights."""
        return (self.gated_experts + self.shared_experts) / self.total if self.total else 0.0


def param_count(model: ModelConfig) -> ParamBreakdown:
    """Parameter totals per category.

    ``embedding`` covers the input table and an untied output head, so a
    model with no decoders still reports ``2 * vocab_size * d_model``.
    """
    return ParamBreakdown(
        attention=model.n_decoders * model.attention_params_per_decoder,
        ffn=model.n_ffn_decoders * model.ffn_params,
        gate=model.n_moe_decoders * model.gate_params,
        shared_experts=model.n_moe_decoders * model.n_shared_experts * model.expert_params,
        gated_experts=model.n_moe_decoders * model.n_gated_experts * model.expert_params,
        embedding=2 * model.vocab_size * model.d_model,
    )


@dataclass(frozen=True)
class ClusterConfig:
    n_nodes: int
    gpus_per_node: int
    gpu: GpuSpec
    cpu_memory: MemoryTier
    ssd: MemoryTier
    interconnect: InterconnectSpec
    name: str = "custom"

    def __post_init__(self) -> None:
        _require(self.n_nodes >= 1, "n_nodes must be >= 1")
        _require(self.gpus_per_node >= 1, "gpus_per_node must be >= 1")
        _require(self.cpu_memory.name is Placement.CPU_MEMORY, "cpu_memory must be the CpuMemory tier")
        _require(self.ssd.name is Placement.SSD, "ssd must be the Ssd tier")
        # each offload tier is provisioned to saturate, not exceed, the GPU link
        for tier in (self.cpu_memory, self.ssd):
            _require(
                tier.read_bandwidth <= self.interconnect.gpu_link_bandwidth * (1 + 1e-12),
                f"aggregated {tier.name.value} read bandwidth exceeds gpu_link_bandwidth",
            )

    @property
    def n_gpus(self) -> int:
        return self.n_nodes * self.gpus_per_node

    def tier(self, placement: Placement) -> MemoryTier:
        return {
            Placement.DEVICE_MEMORY: self.gpu.hbm,
            Placement.CPU_MEMORY: self.cpu_memory,
            Placement.SSD: self.ssd,
        }[placement]


@dataclass(frozen=True)
class Scenario:
    model: ModelConfig
    cluster: ClusterConfig
    batch_size: int
    prompt_length: int
    gated_expert_placement: Placement = Placement.DEVICE_MEMORY
    prefetch_enabled: bool = True
    flash_read_energy_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "gated_expert_placement", Placement.parse(self.gated_expert_placement))
        _require(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size must be >= 1")
        _require(self.prompt_length >= 0, "prompt_length must be >= 0")
        _require(self.flash_read_energy_scale >= 0, "flash_read_energy_scale must be >= 0")
        _require(0 <= self.seed < 2**64, "seed must fit in 64 bits")
        if self.model.n_moe_decoders:
            _require(
                self.model.n_gated_experts % self.cluster.n_gpus == 0,
                "n_gated_experts must divide evenly across GPUs for expert parallelism",
            )

    def replace(self, **changes: Any) -> Scenario:
        return dataclasses.replace(self, **changes)


# --- (de)serialization -------------------------------------------------------

_TIER_KEYS = {f.name for f in dataclasses.fields(MemoryTier)}


def _strict(cls: type, data: dict[str, Any], where: str) -> dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    required = {
        f.name for f in dataclasses.fields(cls)
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
    }
    missing = required - set(data)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")
    return data


def _tier_from_dict(data: dict[str, Any], where: str) -> MemoryTier:
    return MemoryTier(**_strict(MemoryTier, data, where))


def model_from_dict(data: dict[str, Any]) -> ModelConfig:
    try:
        return ModelConfig(**_strict(ModelConfig, data, "model"))
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None


def cluster_from_dict(data: dict[str, Any]) -> ClusterConfig:
    data = dict(_strict(ClusterConfig, data, "cluster"))
    gpu = dict(_strict(GpuSpec, data["gpu"], "cluster.gpu"))
    gpu["hbm"] = _tier_from_dict(gpu["hbm"], "cluster.gpu.hbm")
    data["gpu"] = GpuSpec(**gpu)
    data["cpu_memory"] = _tier_from_dict(data["cpu_memory"], "cluster.cpu_memory")
    data["ssd"] = _tier_from_dict(data["ssd"], "cluster.ssd")
    data["interconnect"] = InterconnectSpec(**_strict(InterconnectSpec, data["interconnect"], "cluster.interconnect"))
    return ClusterConfig(**data)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    return obj


def scenario_to_dict(scenario: Scenario) -> dict[str, Any]:
    out = {"schema_version": SCHEMA_VERSION}
    out.update(_to_plain(scenario))
    return out


def _resolve_ref(value: Any, kind: str, base: Path | None) -> dict[str, Any]:
    """Resolve a model/cluster reference.

    Accepts an inline object, a bundled preset name, a path relative to the
    scenario file, or ``{"preset": name, ...overrides}``.
    """
    if isinstance(value, dict):
        if "preset" not in value:
            return value
        overrides = dict(value)
        resolved = dict(_resolve_ref(overrides.pop("preset"), kind, base))
        unknown = set(overrides) - set(resolved)
        if unknown:
            raise ConfigError(f"{kind}: unknown override keys {sorted(unknown)}")
        resolved.update(overrides)
        return resolved
    if not isinstance(value, str):
        raise ConfigError(f"{kind}: expected an object or a preset name")
    if base is not None:
        candidate = (base / value)
        if candidate.suffix == ".json" and candidate.is_file():
            return _read_json(candidate)
    return _read_bundled(f"{kind}s/{value}.json")


def scenario_from_dict(data: dict[str, Any], base: Path | None = None) -> Scenario:
    if not isinstance(data, dict):
        raise ConfigError("scenario: expected an object")
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    _strict(Scenario, data, "scenario")
    data["model"] = model_from_dict(_resolve_ref(data["model"], "model", base))
    data["cluster"] = cluster_from_dict(_resolve_ref(data["cluster"], "cluster", base))
    try:
        return Scenario(**data)
    except TypeError as exc:
        raise ConfigError(f"scenario: {exc}") from None


def _read_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None


def _read_bundled(relpath: str) -> Any:
    ref = resources.files("moe_energy_sim") / "presets" / relpath
    if not ref.is_file():
        raise ConfigError(f"no bundled preset {relpath!r}")
    try:
        return json.loads(ref.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"preset {relpath}: parse error: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario file.

    ``path`` may be a file on disk or a bundled preset such as
    ``presets/deepseek-r1.json`` (the ``presets/`` prefix is optional).
    """
    p = Path(path)
    if p.is_file():
        return scenario_from_dict(_read_json(p), base=p.parent)
    name = p.name if p.suffix == ".json" else p.name + ".json"
    if not (resources.files("moe_energy_sim") / "presets" / "scenarios" / name).is_file():
        raise ConfigError(f"{path}: no such file or bundled preset")
    return scenario_from_dict(_read_bundled(f"scenarios/{name}"))


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(name: str) -> ModelConfig:
    return model_from_dict(_read_bundled(f"models/{name}.json"))


def load_cluster(name: str) -> ClusterConfig:
    return cluster_from_dict(_read_bundled(f"clusters/{name}.json"))


def preset_names(kind: str) -> list[str]:
    root = resources.files("moe_energy_sim") / "presets" / kind
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))
