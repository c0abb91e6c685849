"""Scenario sweeps: placement comparison, latency breakdowns, Flash-scaling grid."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .config import ClusterConfig, Placement, Scenario, load_cluster
from .energy_model import EVAL_TRIALS, EnergyBreakdown, evaluate
from .expert_stats import activation_ratio_sum, scenario_activation
from .perf_model import LatencyBreakdown, LayerClass

DEFAULT_BATCH_SIZES = tuple(2**i for i in range(11))
DEFAULT_FLASH_SCALES = tuple(round(10 ** (-i / 4), 6) for i in range(9))  # 1.0 .. 0.01
ALL_PLACEMENTS = (Placement.DEVICE_MEMORY, Placement.CPU_MEMORY, Placement.SSD)
CSV_VERSION = 1


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def gpu_only(cluster: ClusterConfig) -> ClusterConfig:
    """Same cluster without CPU memory, so background energy is GPU idle only."""
    return dataclasses.replace(cluster, cpu_memory=dataclasses.replace(cluster.cpu_memory, capacity_per_gpu=0.0))


def energy_row(scenario: Scenario, latency: LatencyBreakdown, energy: EnergyBreakdown) -> dict[str, Any]:
    return {
        "model": scenario.model.name,
        "batch_size": scenario.batch_size,
        "placement": scenario.gated_expert_placement.value,
        "flash_read_energy_scale": scenario.flash_read_energy_scale,
        "per_token_j": energy.per_token,
        "total_j": energy.total,
        "access_j": energy.access_energy,
        "moe_access_j": energy.access_energy_by_class[LayerClass.MOE_GATED_EXPERTS.value],
        "compute_j": energy.compute_energy,
        "background_j": energy.background_energy,
        "moe_access_share": energy.moe_access_share,
        "token_step_latency_s": latency.token_step_latency,
    }


def placement_comparison(
    base: Scenario,
    batch_sizes: Iterable[int] = DEFAULT_BATCH_SIZES,
    placements: Iterable[Placement | str] = ALL_PLACEMENTS,
    seed: int | None = None,
    trials: int = EVAL_TRIALS,
    workers: int = 1,
) -> list[dict[str, Any]]:
    """One row per (batch size, placement), normalised to DeviceMemory at the same batch."""
    placements = [Placement.parse(p) for p in placements]
    if seed is not None:
        base = base.replace(seed=seed)
    batch_sizes = list(batch_sizes)
    needed = list(dict.fromkeys([Placement.DEVICE_MEMORY, *placements]))
    cells = [(b, p) for b in batch_sizes for p in needed]

    def run(cell):
        b, p = cell
        sc = base.replace(batch_size=b, gated_expert_placement=p)
        return energy_row(sc, *evaluate(sc, trials=trials))

    results = dict(zip(cells, _map(run, cells, workers)))
    rows = []
    for b in batch_sizes:
        ref = results[(b, Placement.DEVICE_MEMORY)]
        for p in placements:
            row = dict(results[(b, p)])
            row["normalized_per_token"] = row["per_token_j"] / ref["per_token_j"]
            row["normalized_latency"] = row["token_step_latency_s"] / ref["token_step_latency_s"]
            rows.append(row)
    return rows


@dataclass
class SweepGrid:
    batch_sizes: list[int]
    flash_scales: list[float]
    cells: list[list[float]]
    metadata: dict[str, Any] = field(default_factory=dict)
    crossover: dict[int, float | None] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.cells) != len(self.batch_sizes) or any(len(r) != len(self.flash_scales) for r in self.cells):
            raise ValueError("cells must be |batch_sizes| x |flash_scales|")

    def cell(self, batch_size: int, flash_scale: float) -> float:
        return self.cells[self.batch_sizes.index(batch_size)][self.flash_scales.index(flash_scale)]

    def winning_cells(self) -> list[tuple[int, float]]:
        return [(b, s) for b, row in zip(self.batch_sizes, self.cells)
                for s, v in zip(self.flash_scales, row) if v < 1.0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["csv_version", "batch_size", "flash_read_energy_scale", "energy_ratio"])
        for b, row in zip(self.batch_sizes, self.cells):
            for s, v in zip(self.flash_scales, row):
                w.writerow([CSV_VERSION, b, repr(s), repr(v)])
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {
            "batch_sizes": self.batch_sizes,
            "flash_scales": self.flash_scales,
            "cells": self.cells,
            "crossover": {str(b): c for b, c in self.crossover.items()},
            "metadata": self.metadata,
        }


def flash_scaling_sweep(
    moe: Scenario,
    dense: Scenario,
    batch_sizes: Iterable[int] = DEFAULT_BATCH_SIZES,
    flash_scales: Iterable[float] = DEFAULT_FLASH_SCALES,
    seed: int | None = None,
    trials: int = EVAL_TRIALS,
    workers: int = 1,
    bisect_tol: float = 1e-5,
) -> SweepGrid:
    """Per-token energy of ``moe`` (SSD-offloaded, scaled Flash reads) over ``dense`` (in HBM).

    Both run on a GPU+SSD system: CPU-memory static power is dropped.
    ``crossover[b]`` is the Flash scale at which the ratio reaches 1, found
    by bisection; None when the MoE model never wins at that batch size.
    """
    if seed is not None:
        moe, dense = moe.replace(seed=seed), dense.replace(seed=seed)
    moe = moe.replace(cluster=gpu_only(moe.cluster), gated_expert_placement=Placement.SSD)
    dense = dense.replace(cluster=gpu_only(dense.cluster), gated_expert_placement=Placement.DEVICE_MEMORY)
    batch_sizes, flash_scales = list(batch_sizes), list(flash_scales)

    def run_batch(b: int):
        sc = moe.replace(batch_size=b)
        stats = scenario_activation(sc, trials)
        dense_pt = evaluate(dense.replace(batch_size=b), trials=trials)[1].per_token

        def ratio(s: float) -> float:
            return evaluate(sc.replace(flash_read_energy_scale=s), stats=stats)[1].per_token / dense_pt

        row = [ratio(s) for s in flash_scales]
        hi = max(flash_scales)
        cross = None
        if ratio(0.0) < 1.0:
            lo = 0.0
            if ratio(hi) < 1.0:
                cross = math.inf
            else:
                while hi - lo > bisect_tol:
                    mid = 0.5 * (lo + hi)
                    lo, hi = (mid, hi) if ratio(mid) < 1.0 else (lo, mid)
                cross = 0.5 * (lo + hi)
        return row, cross

    out = _map(run_batch, batch_sizes, workers)
    return SweepGrid(
        batch_sizes=batch_sizes,
        flash_scales=flash_scales,
        cells=[r for r, _ in out],
        metadata={"moe_model": moe.model.name, "dense_model": dense.model.name,
                  "cluster": moe.cluster.name, "seed": moe.seed, "trials": trials},
        crossover={b: c for b, (_, c) in zip(batch_sizes, out)},
    )


LATENCY_COMPONENTS = {
    "attention_s": (LayerClass.ATTENTION,),
    "fc_ffn_s": (LayerClass.FC_FFN,),
    "moe_s": (LayerClass.GATE, LayerClass.MOE_GATED_EXPERTS),
    "comm_s": (LayerClass.ALL_REDUCE, LayerClass.DISPATCH_COMBINE),
    "exposed_prefetch_s": (LayerClass.PREFETCH_TRANSFER,),
}


def latency_report(
    base: Scenario,
    batch_size: int,
    placements: Iterable[Placement | str] = ALL_PLACEMENTS,
    clusters: Iterable[str | ClusterConfig] = ("h100-nvlink4", "h100-nvlink5"),
    seed: int | None = None,
    trials: int = EVAL_TRIALS,
) -> list[dict[str, Any]]:
    """Stacked latency components per (cluster, placement), with the busiest-GPU activation ratio."""
    if seed is not None:
        base = base.replace(seed=seed)
    placements = [Placement.parse(p) for p in placements]
    rows = []
    for c in clusters:
        hw = load_cluster(c) if isinstance(c, str) else c
        hw = dataclasses.replace(hw, n_nodes=base.cluster.n_nodes, gpus_per_node=base.cluster.gpus_per_node)
        sc = base.replace(cluster=hw, batch_size=batch_size)
        ratio = activation_ratio_sum(sc, trials=trials) if sc.model.n_moe_decoders else None
        baseline = evaluate(sc.replace(gated_expert_placement=Placement.DEVICE_MEMORY), trials=trials)[0]
        for p in placements:
            lat = evaluate(sc.replace(gated_expert_placement=p), trials=trials)[0]
            row: dict[str, Any] = {"cluster": hw.name, "model": sc.model.name, "batch_size": batch_size,
                                   "placement": p.value}
            for key, classes in LATENCY_COMPONENTS.items():
                row[key] = math.fsum(lat.totals[c] for c in classes)
            row["token_step_latency_s"] = lat.token_step_latency
            row["penalty"] = lat.token_step_latency / baseline.token_step_latency
            row["activation_ratio_sum"] = ratio
            rows.append(row)
    return rows


def rows_to_csv(rows: list[dict[str, Any]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    fields = ["csv_version", *rows[0].keys()]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({"csv_version": CSV_VERSION, **{k: repr(v) if isinstance(v, float) else v for k, v in row.items()}})
    return buf.getvalue()
