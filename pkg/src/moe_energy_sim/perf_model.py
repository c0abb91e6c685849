"""Decode-step latency: per-layer roofline, collectives, and the MoE prefetch pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .config import (
    ClusterConfig,
    ConfigError,
    GpuSpec,
    InterconnectSpec,
    ModelConfig,
    Placement,
    Scenario,
    param_count,
)
from .expert_stats import ActivationStats, expected_unique_experts

# lower bound on HBM bandwidth left to compute while a prefetch streams in
CONTENTION_FLOOR = 0.10


class LayerClass(str, Enum):
    ATTENTION = "Attention"
    FC_FFN = "FcFfn"
    GATE = "Gate"
    MOE_GATED_EXPERTS = "MoEGatedExperts"
    ALL_REDUCE = "AllReduce"
    DISPATCH_COMBINE = "DispatchCombine"
    PREFETCH_TRANSFER = "PrefetchTransfer"


class CollectiveKind(str, Enum):
    ALL_REDUCE = "AllReduce"
    DISPATCH_COMBINE = "DispatchCombine"
    DATA_PARALLEL_SYNC = "DataParallelSync"


@dataclass(frozen=True)
class ParallelPlan:
    """Tensor parallel within a node, data parallel across nodes, experts across all GPUs."""

    tensor_parallel: int
    data_parallel: int

    @classmethod
    def for_cluster(cls, cluster: ClusterConfig) -> ParallelPlan:
        return cls(tensor_parallel=cluster.gpus_per_node, data_parallel=cluster.n_nodes)

    @property
    def n_gpus(self) -> int:
        return self.tensor_parallel * self.data_parallel


@dataclass(frozen=True)
class LayerWork:
    """Work of one layer in one decode step.

    ``flops``/``hbm_bytes``/``comm_bytes`` are cluster-wide totals and drive
    energy. ``gpu_flops``/``gpu_hbm_bytes`` are for the busiest GPU and
    drive latency. ``internode_bytes`` is the part of ``comm_bytes`` that
    crosses InfiniBand.
    """

    layer_class: LayerClass
    flops: float = 0.0
    hbm_bytes: float = 0.0
    comm_bytes: float = 0.0
    source_tier: Placement = Placement.DEVICE_MEMORY
    gpu_flops: float = 0.0
    gpu_hbm_bytes: float = 0.0
    internode_bytes: float = 0.0
    comm_time: float = 0.0

    def __post_init__(self) -> None:
        for name in ("flops", "hbm_bytes", "comm_bytes", "gpu_flops", "gpu_hbm_bytes", "internode_bytes", "comm_time"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def is_collective(self) -> bool:
        return self.layer_class in (LayerClass.ALL_REDUCE, LayerClass.DISPATCH_COMBINE)


@dataclass
class DecoderLatency:
    compute_time: float = 0.0
    comm_time: float = 0.0
    prefetch_exposed_time: float = 0.0

    @property
    def total(self) -> float:
        return self.compute_time + self.comm_time + self.prefetch_exposed_time


@dataclass
class LatencyBreakdown:
    per_decoder: list[DecoderLatency]
    totals: dict[LayerClass, float]
    token_step_latency: float
    min_effective_hbm_bw: float = math.inf

    @property
    def exposed_prefetch_time(self) -> float:
        return sum(d.prefetch_exposed_time for d in self.per_decoder)


# --- collectives and roofline --------------------------------------------------

def collective_time(kind: CollectiveKind | str, nbytes: float, plan: ParallelPlan, interconnect: InterconnectSpec) -> float:
    """Ring-style collective cost in seconds.

    AllReduce: ``nbytes`` is each participant's buffer, reduced over the
    tensor-parallel group on the GPU links. DispatchCombine: ``nbytes`` is
    the cluster-wide routed activation volume, spread uniformly over all
    GPUs; the intra-node and inter-node legs run concurrently. DataParallelSync:
    ring all-reduce of ``nbytes`` across nodes over InfiniBand.
    """
    kind = CollectiveKind(kind)
    if nbytes <= 0:
        return 0.0
    if kind is CollectiveKind.ALL_REDUCE:
        p = plan.tensor_parallel
        return 2 * (p - 1) / p * nbytes / interconnect.gpu_link_bandwidth
    if kind is CollectiveKind.DATA_PARALLEL_SYNC:
        p = plan.data_parallel
        return 2 * (p - 1) / p * nbytes / interconnect.internode_bandwidth
    g, tp, dp = plan.n_gpus, plan.tensor_parallel, plan.data_parallel
    per_gpu_intra = nbytes / g * (tp - 1) / g
    per_node_inter = nbytes / dp * (g - tp) / g
    return max(per_gpu_intra / interconnect.gpu_link_bandwidth,
               per_node_inter / interconnect.internode_bandwidth)


def roofline_time(work: LayerWork, gpu: GpuSpec, effective_hbm_bw: float) -> float:
    if effective_hbm_bw <= 0:
        raise ValueError("effective_hbm_bw must be positive")
    return max(work.gpu_flops / gpu.peak_flops, work.gpu_hbm_bytes / effective_hbm_bw)


# --- per-layer accounting ----------------------------------------------------

def expert_weight_bytes(model: ModelConfig) -> float:
    return model.expert_params * model.bytes_per_param


def layer_work(
    model: ModelConfig,
    scenario: Scenario,
    layer_class: LayerClass | str,
    stats: ActivationStats | None = None,
    decoder_kind: str = "moe",
) -> LayerWork:
    """Work for one layer of one decoder at the first decode step (KV length ``L_in + 1``).

    ``decoder_kind`` picks what FcFfn means: the dense FFN (``"ffn"``), the
    shared experts (``"moe"``), or the output head (``"head"``).
    """
    layer_class = LayerClass(layer_class)
    cluster = scenario.cluster
    plan = ParallelPlan.for_cluster(cluster)
    tp, dp, g = plan.tensor_parallel, plan.data_parallel, plan.n_gpus
    b = scenario.batch_size
    b_node = b / dp
    bpp = model.bytes_per_param
    act = model.d_model * bpp  # one token's hidden state

    def replicated(params: float) -> LayerWork:
        # tensor parallel inside the node, one weight copy read per node
        w = params * bpp
        return LayerWork(
            layer_class,
            flops=2 * params * b,
            hbm_bytes=w * dp + 2 * b * act,
            gpu_flops=2 * params * b_node / tp,
            gpu_hbm_bytes=w / tp + 2 * b_node * act / tp,
        )

    if layer_class is LayerClass.ATTENTION:
        params = model.attention_params_per_decoder
        kv_len = scenario.prompt_length + 1
        kv = b * kv_len * model.kv_width_per_token
        score_flops = 4 * model.n_heads * model.d_head * kv_len * b
        base = replicated(params)
        return LayerWork(
            layer_class,
            flops=base.flops + score_flops,
            hbm_bytes=base.hbm_bytes + kv,
            gpu_flops=base.gpu_flops + score_flops / g,
            gpu_hbm_bytes=base.gpu_hbm_bytes + kv / g,
        )
    if layer_class is LayerClass.FC_FFN:
        if decoder_kind == "ffn":
            return replicated(model.ffn_params)
        if decoder_kind == "head":
            return replicated(model.vocab_size * model.d_model)
        return replicated(model.n_shared_experts * model.expert_params)
    if layer_class is LayerClass.GATE:
        return replicated(model.gate_params)
    if layer_class is LayerClass.ALL_REDUCE:
        nbytes = b_node * act
        moved = 2 * (tp - 1) * nbytes * dp
        return LayerWork(layer_class, comm_bytes=moved,
                         comm_time=collective_time(CollectiveKind.ALL_REDUCE, nbytes, plan, cluster.interconnect))
    if layer_class is LayerClass.DISPATCH_COMBINE:
        # one direction; a decoder has a dispatch and a combine
        routed = b * model.top_k * act
        crossing = routed * (g - 1) / g
        inter = routed * (g - tp) / g
        return LayerWork(layer_class, comm_bytes=crossing, internode_bytes=inter,
                         comm_time=collective_time(CollectiveKind.DISPATCH_COMBINE, routed, plan, cluster.interconnect))
    if layer_class is LayerClass.MOE_GATED_EXPERTS:
        if stats is None:
            raise ValueError("MoEGatedExperts work needs activation stats")
        w = expert_weight_bytes(model)
        routed = b * model.top_k
        return LayerWork(
            layer_class,
            flops=2 * model.expert_params * routed,
            hbm_bytes=stats.expected_unique * w + 2 * routed * act,
            source_tier=scenario.gated_expert_placement,
            gpu_flops=2 * model.expert_params * stats.per_gpu_token_load_max,
            gpu_hbm_bytes=stats.expected_max_per_gpu * w + 2 * stats.per_gpu_token_load_max * act,
        )
    if layer_class is LayerClass.PREFETCH_TRANSFER:
        if stats is None:
            raise ValueError("PrefetchTransfer work needs activation stats")
        w = expert_weight_bytes(model)
        return LayerWork(
            layer_class,
            comm_bytes=stats.expected_unique * w,
            source_tier=scenario.gated_expert_placement,
            gpu_hbm_bytes=stats.expected_max_per_gpu * w,
        )
    raise ValueError(f"unhandled layer class {layer_class}")


@dataclass(frozen=True)
class TouchedParams:
    total: float
    gated: float
    model_total: int

    @property
    def share_of_model(self) -> float:
        return self.total / self.model_total

    @property
    def gated_share(self) -> float:
        return self.gated / self.total if self.total else 0.0


def touched_params(model: ModelConfig, batch_size: int) -> TouchedParams:
    """Expected weights read in one decode step: everything except idle gated experts."""
    counts = param_count(model)
    unique = expected_unique_experts(model.n_gated_experts, model.top_k, batch_size) if model.n_moe_decoders else 0.0
    gated = model.n_moe_decoders * unique * model.expert_params
    return TouchedParams(counts.total - counts.gated_experts + gated, gated, counts.total)


@dataclass
class DecoderWork:
    kind: str
    layers: list[LayerWork]
    # index into ``layers`` after which the gate output is available
    gate_index: int | None = None
    moe_index: int | None = None
    transfer: LayerWork | None = None


def decoder_works(scenario: Scenario, stats: ActivationStats | None) -> tuple[list[DecoderWork], LayerWork]:
    """Per-decoder layer sequences plus the output-head work."""
    model = scenario.model
    C = LayerClass
    offloaded = scenario.gated_expert_placement is not Placement.DEVICE_MEMORY
    out = []
    for kind in model.decoder_kinds():
        lw = lambda c, k=kind: layer_work(model, scenario, c, stats, decoder_kind=k)  # noqa: E731
        layers = [lw(C.ATTENTION), lw(C.ALL_REDUCE)]
        if kind == "ffn":
            layers += [lw(C.FC_FFN), lw(C.ALL_REDUCE)]
            out.append(DecoderWork(kind, layers))
            continue
        layers.append(lw(C.GATE))
        gate_index = len(layers) - 1
        layers.append(lw(C.DISPATCH_COMBINE))
        if model.n_shared_experts:
            layers.append(lw(C.FC_FFN))
        layers.append(lw(C.MOE_GATED_EXPERTS))
        moe_index = len(layers) - 1
        layers += [lw(C.DISPATCH_COMBINE), lw(C.ALL_REDUCE)]
        transfer = lw(C.PREFETCH_TRANSFER) if offloaded else None
        out.append(DecoderWork(kind, layers, gate_index, moe_index, transfer))
    head = layer_work(model, scenario, C.FC_FFN, stats, decoder_kind="head")
    return out, head


# --- timeline ----------------------------------------------------------------

@dataclass
class _Link:
    """Inbound offload link of the busiest GPU: transfers queue back to back."""

    rate: float
    windows: list[tuple[float, float]] = field(default_factory=list)

    def schedule(self, earliest: float, nbytes: float) -> tuple[float, float]:
        start = max(earliest, self.windows[-1][1] if self.windows else 0.0)
        end = start + nbytes / self.rate
        self.windows.append((start, end))
        return start, end

    def active_until(self, t: float) -> tuple[bool, float]:
        """(transfer in flight at t, time the current state next changes)."""
        for start, end in self.windows:
            if start <= t < end:
                return True, end
            if t < start:
                return False, start
        return False, math.inf


def _run_roofline(t: float, work: LayerWork, gpu: GpuSpec, link: _Link | None, contended_bw: float) -> float:
    """Advance through one layer whose memory rate drops while a transfer is in flight."""
    nominal = gpu.hbm.read_bandwidth
    full = roofline_time(work, gpu, nominal)
    if full == 0.0:
        return t
    if link is None:
        return t + full
    slow = roofline_time(work, gpu, contended_bw)
    progress = 0.0
    while True:
        busy, change = link.active_until(t)
        duration = slow if busy else full
        needed = (1.0 - progress) * duration
        if t + needed <= change:
            return t + needed
        progress += (change - t) / duration
        t = change


def _walk(
    scenario: Scenario,
    per_decoder_work: list[DecoderWork],
    stats: ActivationStats | None,
    head: LayerWork | None = None,
    overlap_fraction: float = 1.0,
) -> LatencyBreakdown:
    """Walk the decode step layer by layer and place gated-expert transfers.

    A MoE decoder's experts are fetched once the previous decoder's gate has
    produced its routing, provided that decoder is itself a MoE decoder and
    prefetching is on; otherwise the fetch is issued on demand right before
    the experts run and is fully exposed. ``overlap_fraction`` (0..1) is the
    share of the previous decoder's post-gate layers the transfer may
    overlap; 1 starts it right after the gate, 0 at the next decoder.
    """
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ValueError("overlap_fraction must be in [0, 1]")
    cluster = scenario.cluster
    gpu = cluster.gpu
    placement = scenario.gated_expert_placement
    offloaded = placement is not Placement.DEVICE_MEMORY
    totals = {c: 0.0 for c in LayerClass}
    records = [DecoderLatency() for _ in per_decoder_work]
    link = None
    contended_bw = gpu.hbm.read_bandwidth
    if offloaded:
        rate = min(cluster.tier(placement).read_bandwidth, cluster.interconnect.gpu_link_bandwidth)
        link = _Link(rate)
        contended_bw = max(gpu.hbm.read_bandwidth - rate, CONTENTION_FLOOR * gpu.hbm.read_bandwidth)

    prefetched: dict[int, tuple[float, float]] = {}
    t = 0.0
    for i, dec in enumerate(per_decoder_work):
        rec = records[i]
        nxt = per_decoder_work[i + 1] if i + 1 < len(per_decoder_work) else None
        can_prefetch = (offloaded and scenario.prefetch_enabled and dec.kind == "moe"
                        and nxt is not None and nxt.kind == "moe")
        trigger = trigger_time = None
        if can_prefetch:
            post_gate = len(dec.layers) - 1 - dec.gate_index
            trigger = dec.gate_index + math.ceil((1.0 - overlap_fraction) * post_gate)
        for j, work in enumerate(dec.layers):
            if j == dec.moe_index and dec.transfer is not None:
                if i not in prefetched:
                    prefetched[i] = link.schedule(t, dec.transfer.gpu_hbm_bytes)
                    if trigger_time is not None:
                        # the next fetch was held back so the link stays FIFO
                        prefetched[i + 1] = link.schedule(trigger_time, nxt.transfer.gpu_hbm_bytes)
                _, end = prefetched[i]
                if end > t:
                    rec.prefetch_exposed_time += end - t
                    totals[LayerClass.PREFETCH_TRANSFER] += end - t
                    t = end
            start = t
            if work.is_collective:
                t += work.comm_time
                rec.comm_time += t - start
            else:
                t = _run_roofline(t, work, gpu, link, contended_bw)
                rec.compute_time += t - start
            totals[work.layer_class] += t - start
            if trigger is not None and j == trigger:
                trigger_time = t
                # an on-demand fetch for this decoder not yet issued must go first
                if i in prefetched or dec.transfer is None:
                    prefetched[i + 1] = link.schedule(t, nxt.transfer.gpu_hbm_bytes)
        if i == len(per_decoder_work) - 1 and head is not None:
            start = t
            t = _run_roofline(t, head, gpu, link, contended_bw)
            rec.compute_time += t - start
            totals[LayerClass.FC_FFN] += t - start
    min_bw = contended_bw if offloaded and link.windows else gpu.hbm.read_bandwidth
    return LatencyBreakdown(records, totals, t, min_bw)


def prefetch_timeline(
    scenario: Scenario,
    per_decoder_work: list[DecoderWork],
    stats: ActivationStats | None,
    head: LayerWork | None = None,
    overlap_fraction: float = 1.0,
) -> LatencyBreakdown:
    if scenario.gated_expert_placement is Placement.DEVICE_MEMORY:
        raise ConfigError("nothing to prefetch: gated experts already in DeviceMemory")
    return _walk(scenario, per_decoder_work, stats, head, overlap_fraction)


def decode_latency(
    scenario: Scenario, stats: ActivationStats | None, overlap_fraction: float = 1.0,
) -> tuple[LatencyBreakdown, list[DecoderWork], LayerWork]:
    """Latency of the whole decode step for any placement, plus the work it was built from."""
    works, head = decoder_works(scenario, stats)
    return _walk(scenario, works, stats, head, overlap_fraction), works, head
