import dataclasses
import sys
from collections import defaultdict
from pathlib import Path

import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from moe_energy_sim.config import ModelConfig, Placement, Scenario, load_cluster  # noqa: E402

_criteria: dict[int, dict] = defaultdict(lambda: {"desc": "", "outcomes": []})


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, desc): acceptance criterion this test covers")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, desc = marker.args
    entry = _criteria[n]
    entry["desc"] = desc
    entry["outcomes"].append((item.name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        ok = all(passed for _, passed in entry["outcomes"])
        failed = [name for name, passed in entry["outcomes"] if not passed]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {entry['desc']}"
        if failed:
            line += f"  (failed: {', '.join(failed)})"
        terminalreporter.write_line(line)


def tiny_model(**overrides) -> ModelConfig:
    fields = dict(
        name="tiny-moe", d_model=256, n_heads=4, d_head=64, n_kv_heads=2, kv_width_per_token=512,
        n_ffn_decoders=1, n_moe_decoders=3, ffn_inner_dim=512, expert_inner_dim=384,
        n_gated_experts=8, n_shared_experts=1, top_k=2, vocab_size=1000,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_scenario(n_nodes=1, gpus_per_node=2, cluster="h100-nvlink5", **overrides) -> Scenario:
    model = overrides.pop("model", None) or tiny_model()
    hw = dataclasses.replace(load_cluster(cluster), n_nodes=n_nodes, gpus_per_node=gpus_per_node)
    fields = dict(model=model, cluster=hw, batch_size=4, prompt_length=128)
    fields.update(overrides)
    return Scenario(**fields)


@st.composite
def scenarios(draw, placements=tuple(Placement), moe_only=False):
    """Small random scenarios that evaluate in a few milliseconds."""
    n_ex = draw(st.sampled_from([4, 8, 16]))
    top_k = draw(st.integers(1, min(4, n_ex)))
    n_moe = draw(st.integers(1, 3))
    model = tiny_model(
        d_model=draw(st.sampled_from([128, 256, 512])),
        n_ffn_decoders=draw(st.integers(0, 2)),
        n_moe_decoders=n_moe,
        n_gated_experts=n_ex,
        n_shared_experts=draw(st.integers(0, 1)),
        top_k=top_k,
        expert_inner_dim=draw(st.sampled_from([128, 512, 2048])),
        kv_width_per_token=draw(st.sampled_from([128, 1024, 8192])),
        interleaved=draw(st.booleans()),
    )
    gpn = draw(st.sampled_from([g for g in (1, 2, 4) if n_ex % g == 0]))
    nodes = draw(st.sampled_from([n for n in (1, 2) if n_ex % (n * gpn) == 0]))
    return tiny_scenario(
        n_nodes=nodes,
        gpus_per_node=gpn,
        cluster=draw(st.sampled_from(["h100-nvlink4", "h100-nvlink5"])),
        model=model,
        batch_size=draw(st.integers(1, 256)),
        prompt_length=draw(st.integers(0, 2048)),
        gated_expert_placement=draw(st.sampled_from(list(placements))),
        prefetch_enabled=draw(st.booleans()),
        flash_read_energy_scale=draw(st.floats(0.0, 1.0)),
        seed=draw(st.integers(0, 2**32)),
    )
