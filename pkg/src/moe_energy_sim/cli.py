"""Command-line front end.

Exit status is 0 only when every validation passed and every output file
was written; configuration and domain errors exit with 2, I/O errors with 3.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import ConfigError, Placement, Scenario, load_scenario, scenario_to_dict
from .energy_model import EVAL_TRIALS, EnergyBreakdown, evaluate
from .expert_stats import DEFAULT_TRIALS, DomainError, expected_unique_experts, sample_activation, scenario_activation
from .experiments import (
    DEFAULT_BATCH_SIZES,
    DEFAULT_FLASH_SCALES,
    SweepGrid,
    energy_row,
    flash_scaling_sweep,
    latency_report,
    placement_comparison,
    rows_to_csv,
)
from .perf_model import LatencyBreakdown

OUTPUT_SCHEMA_VERSION = 1
EXIT_INVALID = 2
EXIT_IO = 3


class CliError(Exception):
    def __init__(self, message: str, status: int = EXIT_INVALID):
        super().__init__(message)
        self.status = status


@dataclass
class RunManifest:
    command: str
    tool_version: str
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_clock_runtime_s: float = 0.0

    def to_json(self) -> str:
        return _dumps(asdict(self))


def sig4(x: float | None) -> str:
    if x is None:
        return "-"
    return f"{x:.4g}"


def _dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _sha256(text: str | bytes) -> str:
    data = text.encode("utf-8") if isinstance(text, str) else text
    return hashlib.sha256(data).hexdigest()


def _hash_input(scenario: Scenario) -> str:
    """Hash of the resolved scenario; presets and file overrides hash alike."""
    return _sha256(json.dumps(scenario_to_dict(scenario), sort_keys=True))


def write_files_atomically(files: dict[Path, str]) -> None:
    """Write every file or none of them.

    Each file goes to a temp file in its target directory first; renames
    happen only after all temp files exist. On failure, temps and any
    already-renamed targets are removed.
    """
    temps: list[tuple[str, Path]] = []
    done: list[Path] = []
    try:
        for target, text in files.items():
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
            temps.append((tmp, target))
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for tmp, target in temps:
            os.replace(tmp, target)
            done.append(target)
    except OSError as exc:
        for tmp, _ in temps:
            if os.path.exists(tmp):
                os.unlink(tmp)
        for target in done:
            target.unlink(missing_ok=True)
        raise CliError(f"cannot write outputs: {exc}", EXIT_IO) from None


def _load(ref: str) -> Scenario:
    try:
        return load_scenario(ref)
    except FileNotFoundError as exc:
        raise CliError(f"{ref}: {exc.strerror}") from None


def _apply_overrides(sc: Scenario, args: argparse.Namespace) -> Scenario:
    changes: dict[str, Any] = {}
    if getattr(args, "placement", None):
        changes["gated_expert_placement"] = Placement.parse(args.placement)
    if getattr(args, "batch", None) is not None:
        changes["batch_size"] = args.batch
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "flash_scale", None) is not None:
        changes["flash_read_energy_scale"] = args.flash_scale
    if getattr(args, "no_prefetch", False):
        changes["prefetch_enabled"] = False
    return sc.replace(**changes) if changes else sc


def latency_to_dict(lat: LatencyBreakdown) -> dict[str, Any]:
    return {
        "token_step_latency_s": lat.token_step_latency,
        "exposed_prefetch_s": lat.exposed_prefetch_time,
        "min_effective_hbm_bw": lat.min_effective_hbm_bw,
        "totals_s": {k.value: v for k, v in lat.totals.items()},
        "per_decoder": [asdict(d) for d in lat.per_decoder],
    }


def energy_to_dict(en: EnergyBreakdown) -> dict[str, Any]:
    return {
        "total_j": en.total,
        "per_token_j": en.per_token,
        "access_j": en.access_energy,
        "compute_j": en.compute_energy,
        "background_j": en.background_energy,
        "moe_access_share": en.moe_access_share,
        "access_j_by_class": en.access_energy_by_class,
        "access_j_by_path": en.access_energy_by_path,
        "compute_j_by_class": en.compute_energy_by_class,
        "batch_size": en.batch_size,
    }


def _evaluate(sc: Scenario, trials: int):
    stats = scenario_activation(sc, trials) if sc.model.n_moe_decoders else None
    lat, en = evaluate(sc, trials=trials, stats=stats)
    return stats, lat, en


# --- commands -------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    sc = _apply_overrides(_load(args.config), args)
    manifest = RunManifest("simulate", __version__, sc.seed, inputs={args.config: _hash_input(sc)})
    stats, lat, en = _evaluate(sc, args.trials)
    result: dict[str, Any] = {
        "schema_version": OUTPUT_SCHEMA_VERSION,
        "tool_version": __version__,
        "trials": args.trials,
        "scenario": scenario_to_dict(sc),
        "activation": asdict(stats) if stats else None,
        "latency": latency_to_dict(lat),
        "energy": energy_to_dict(en),
        "per_token_j": en.per_token,
    }
    base_en = None
    if args.baseline:
        _, base_lat, base_en = _evaluate(sc.replace(gated_expert_placement=Placement.DEVICE_MEMORY), args.trials)
        result["baseline"] = {
            "placement": Placement.DEVICE_MEMORY.value,
            "per_token_j": base_en.per_token,
            "token_step_latency_s": base_lat.token_step_latency,
            "normalized_per_token": en.per_token / base_en.per_token,
            "normalized_latency": lat.token_step_latency / base_lat.token_step_latency,
        }

    print(f"{sc.model.name} on {sc.cluster.name} ({sc.cluster.n_gpus} GPUs), "
          f"B={sc.batch_size}, experts in {sc.gated_expert_placement.value}")
    print(f"  per-token energy   {sig4(en.per_token)} J")
    print(f"  access / compute / background  {sig4(en.access_energy)} / {sig4(en.compute_energy)} / "
          f"{sig4(en.background_energy)} J")
    print(f"  MoE access share   {sig4(100 * en.moe_access_share)} %")
    print(f"  token-step latency {sig4(lat.token_step_latency * 1e3)} ms "
          f"(exposed prefetch {sig4(lat.exposed_prefetch_time * 1e3)} ms)")
    if base_en is not None:
        print(f"  vs DeviceMemory    {sig4(result['baseline']['normalized_per_token'])}x energy, "
              f"{sig4(result['baseline']['normalized_latency'])}x latency")

    if args.out:
        out = Path(args.out)
        if args.format == "csv":
            row = energy_row(sc, lat, en)
            if base_en is not None:
                row["normalized_per_token"] = result["baseline"]["normalized_per_token"]
            text = rows_to_csv([row])
        else:
            text = _dumps(result)
        manifest.outputs = {out.name: _sha256(text)}
        manifest.wall_clock_runtime_s = time.perf_counter() - started
        write_files_atomically({out: text, out.with_name(out.name + ".manifest.json"): manifest.to_json()})
    return 0


def _parse_list(text: str | None, cast, default):
    items = default if not text else [x for x in text.split(",") if x.strip()]
    try:
        return [cast(x) for x in items]
    except ValueError:
        raise CliError(f"cannot parse list {text!r}") from None


def _crossover_json(c: float | None):
    return "above_grid" if c is not None and math.isinf(c) else c


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    moe, dense = _load(args.moe_config), _load(args.dense_config)
    batches = _parse_list(args.batches, int, DEFAULT_BATCH_SIZES)
    scales = _parse_list(args.scales, float, DEFAULT_FLASH_SCALES)
    if any(b < 1 for b in batches) or any(s < 0 for s in scales):
        raise CliError("batch sizes must be >= 1 and flash scales >= 0")
    seed = args.seed if args.seed is not None else moe.seed
    manifest = RunManifest("sweep", __version__, seed, inputs={
        args.moe_config: _hash_input(moe),
        args.dense_config: _hash_input(dense),
    })
    grid: SweepGrid = flash_scaling_sweep(moe, dense, batches, scales, seed=seed, trials=args.trials,
                                          workers=args.workers)
    report = grid.to_dict()
    report["crossover"] = {k: _crossover_json(v) for k, v in report["crossover"].items()}
    report["schema_version"] = OUTPUT_SCHEMA_VERSION
    outputs = {"sweep.csv": grid.to_csv(), "sweep.json": _dumps(report)}

    print(f"{moe.model.name} (Ssd) vs {dense.model.name} (DeviceMemory), per-token energy ratio")
    print("  batch  crossover flash scale")
    for b, c in grid.crossover.items():
        label = "none" if c is None else (f">= {sig4(max(scales))}" if math.isinf(c) else sig4(c))
        print(f"  {b:>5}  {label}")

    out = Path(args.out)
    manifest.outputs = {name: _sha256(text) for name, text in outputs.items()}
    manifest.wall_clock_runtime_s = time.perf_counter() - started
    files = {out / name: text for name, text in outputs.items()}
    files[out / "manifest.json"] = manifest.to_json()
    write_files_atomically(files)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    base = _load(args.config)
    batches = _parse_list(args.batches, int, DEFAULT_BATCH_SIZES)
    placements = _parse_list(args.placements, Placement.parse, ("hbm", "ddr", "ssd"))
    manifest = RunManifest("compare", __version__, args.seed if args.seed is not None else base.seed,
                           inputs={args.config: _hash_input(base)})
    rows = placement_comparison(base, batches, placements, seed=args.seed, trials=args.trials, workers=args.workers)
    print(f"{base.model.name}: per-token energy normalised to DeviceMemory")
    print("  batch  " + "  ".join(f"{p.short:>8}" for p in placements))
    for b in batches:
        vals = [r["normalized_per_token"] for r in rows if r["batch_size"] == b]
        print(f"  {b:>5}  " + "  ".join(f"{sig4(v):>8}" for v in vals))
    if args.out:
        _emit_table(Path(args.out), rows, args.format, manifest, started)
    return 0


def cmd_latency(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    base = _load(args.config)
    placements = _parse_list(args.placements, Placement.parse, ("hbm", "ddr", "ssd"))
    clusters = _parse_list(args.clusters, str, ("h100-nvlink4", "h100-nvlink5"))
    manifest = RunManifest("latency", __version__, args.seed if args.seed is not None else base.seed,
                           inputs={args.config: _hash_input(base)})
    rows = latency_report(base, args.batch if args.batch is not None else base.batch_size, placements,
                          clusters, seed=args.seed, trials=args.trials)
    print(f"{base.model.name}: token-step latency (ms)")
    for r in rows:
        print(f"  {r['cluster']:<14} {r['placement']:<13} {sig4(r['token_step_latency_s'] * 1e3):>8}  "
              f"x{sig4(r['penalty'])}  exposed {sig4(r['exposed_prefetch_s'] * 1e3)}")
    if args.out:
        _emit_table(Path(args.out), rows, args.format, manifest, started)
    return 0


def _emit_table(out: Path, rows: list[dict], fmt: str, manifest: RunManifest, started: float) -> None:
    if fmt == "csv":
        text = rows_to_csv(rows)
    else:
        text = _dumps({"schema_version": OUTPUT_SCHEMA_VERSION, "tool_version": __version__, "rows": rows})
    manifest.outputs = {out.name: _sha256(text)}
    manifest.wall_clock_runtime_s = time.perf_counter() - started
    write_files_atomically({out: text, out.with_name(out.name + ".manifest.json"): manifest.to_json()})


def cmd_stats(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    stats = sample_activation(args.n_ex, args.top_k, args.batch, args.gpus, seed=args.seed, trials=args.trials)
    closed = expected_unique_experts(args.n_ex, args.top_k, args.batch)
    result = {
        "schema_version": OUTPUT_SCHEMA_VERSION,
        "n_ex": args.n_ex,
        "top_k": args.top_k,
        "batch": args.batch,
        "gpus": args.gpus,
        "expected_unique_closed_form": closed,
        **asdict(stats),
    }
    if args.json:
        sys.stdout.write(_dumps(result))
    else:
        print(f"expected_unique       {sig4(closed)}  (closed form)")
        print(f"  Monte Carlo         {sig4(stats.expected_unique)} +/- {sig4(stats.ci95_halfwidth)}")
        print(f"expected_max_per_gpu  {sig4(stats.expected_max_per_gpu)} +/- "
              f"{sig4(stats.max_per_gpu_ci95_halfwidth)}  of {args.n_ex // args.gpus}")
        print(f"busiest GPU tokens    {sig4(stats.per_gpu_token_load_max)}")
        print(f"trials {stats.sample_count}, seed {stats.rng_seed}")
    if args.out:
        out = Path(args.out)
        text = _dumps(result)
        manifest = RunManifest("stats", __version__, args.seed, outputs={out.name: _sha256(text)},
                               wall_clock_runtime_s=time.perf_counter() - started)
        write_files_atomically({out: text, out.with_name(out.name + ".manifest.json"): manifest.to_json()})
    return 0


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moe-energy-sim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trials=EVAL_TRIALS, batch=True):
        sp.add_argument("--seed", type=int, help="routing RNG seed (overrides the config)")
        sp.add_argument("--trials", type=int, default=trials, help="Monte Carlo trials (default %(default)s)")
        if batch:
            sp.add_argument("--batch", type=int, help="batch size (overrides the config)")

    s = sub.add_parser("simulate", help="evaluate one scenario")
    s.add_argument("config", help="scenario JSON file or bundled preset name")
    s.add_argument("--placement", choices=["hbm", "ddr", "ssd"])
    s.add_argument("--flash-scale", type=float)
    s.add_argument("--no-prefetch", action="store_true", help="fetch offloaded experts on demand")
    s.add_argument("--baseline", action="store_true", help="also report ratios against DeviceMemory")
    s.add_argument("--out", help="output file")
    s.add_argument("--format", choices=["json", "csv"], default="json")
    common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="Flash read-energy scaling grid (MoE on Ssd vs dense in HBM)")
    s.add_argument("moe_config")
    s.add_argument("dense_config")
    s.add_argument("--batches", help="comma-separated batch sizes (default powers of two 1..1024)")
    s.add_argument("--scales", help="comma-separated Flash scales (default log-spaced 1.0..0.01)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--workers", type=int, default=1)
    common(s, batch=False)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare", help="per-token energy by placement, normalised to DeviceMemory")
    s.add_argument("config")
    s.add_argument("--batches")
    s.add_argument("--placements", help="comma-separated, e.g. hbm,ddr,ssd")
    s.add_argument("--out")
    s.add_argument("--format", choices=["json", "csv"], default="csv")
    s.add_argument("--workers", type=int, default=1)
    common(s, batch=False)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("latency", help="stacked latency components per placement and interconnect")
    s.add_argument("config")
    s.add_argument("--placements")
    s.add_argument("--clusters", help="comma-separated cluster presets")
    s.add_argument("--out")
    s.add_argument("--format", choices=["json", "csv"], default="csv")
    common(s)
    s.set_defaults(func=cmd_latency)

    s = sub.add_parser("stats", help="expert-activation statistics under uniform routing")
    s.add_argument("n_ex", type=int)
    s.add_argument("top_k", type=int)
    s.add_argument("batch", type=int)
    s.add_argument("gpus", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    s.add_argument("--json", action="store_true", help="machine-readable output")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.status
    except (ConfigError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
