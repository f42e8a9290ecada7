"""Chip/node topology, 3D parallelism plans, and the per-chip memory model.

Memory accounting follows a documented internal cost model (constants are
simulator parameters, not measured values):

  weights    2 bytes per stage-local param, sharded 1/tp
  grads      2 bytes per stage-local trainable param, sharded 1/tp
  optimizer  12 bytes per stage-local trainable param (fp32 master + two
             moments), sharded 1/tp, and 1/dp with a distributed optimizer
  activations per decoder layer, per token:
               24*h/tp   TP-sharded class (linear inputs, attention proj)
               10*h      replicated class (norms, residuals, dropout masks);
                         divided by tp iff sequence parallelism is on
             plus 2*query_heads*seq^2*microbatch/tp bytes of attention
             scores per layer, which selective recomputation removes;
             full recomputation keeps only a 2*h boundary checkpoint per
             layer per token. The deepest 1F1B stage holds min(pp, m)
             microbatches in flight, and it also owns the embeddings,
             vision encoder, and adapter.
"""

from __future__ import annotations

from dataclasses import dataclass

from .arch import (
    RECOMPUTE_POLICIES,
    ModelSpec,
    adapter_param_count,
    lm_layer_param_count,
    vision_param_count,
)
from .workload import TrainingStage

LAYER_BALANCE_MODES = ("uniform", "cost-balanced")


@dataclass(frozen=True)
class ChipSpec:
    peak_flops: float
    memory: float
    has_independent_comm_unit: bool = True

    def __post_init__(self) -> None:
        if self.peak_flops <= 0 or self.memory <= 0:
            raise ValueError("chip peak_flops and memory must be positive")


@dataclass(frozen=True)
class Topology:
    nodes: int
    chips_per_node: int
    intra_node_bw: float
    inter_node_bw: float
    intra_latency: float
    inter_latency: float
    chip: ChipSpec

    def __post_init__(self) -> None:
        if self.nodes < 1 or self.chips_per_node < 1:
            raise ValueError("node counts must be >= 1")
        if self.intra_node_bw <= 0 or self.inter_node_bw <= 0:
            raise ValueError("bandwidths must be positive")
        if self.intra_latency < 0 or self.inter_latency < 0:
            raise ValueError("latencies must be >= 0")

    @property
    def total_chips(self) -> int:
        return self.nodes * self.chips_per_node


@dataclass(frozen=True)
class ParallelismPlan:
    dp: int
    tp: int
    pp: int
    microbatches_per_step: int
    sequence_parallel: bool = False
    recompute: str = "none"
    overlap_grad_sync: bool = True
    fusion_chunks: int = 1
    distributed_optimizer: bool = False
    layer_balance: str = "uniform"

    def __post_init__(self) -> None:
        if min(self.dp, self.tp, self.pp) < 1:
            raise ValueError("dp, tp, pp must all be >= 1")
        if self.microbatches_per_step < 1:
            raise ValueError("microbatches_per_step must be >= 1")
        if self.fusion_chunks < 1:
            raise ValueError("fusion_chunks must be >= 1")
        if self.recompute not in RECOMPUTE_POLICIES:
            raise ValueError(f"unknown recompute policy {self.recompute!r}")
        if self.layer_balance not in LAYER_BALANCE_MODES:
            raise ValueError(f"unknown layer balance mode {self.layer_balance!r}")


@dataclass(frozen=True)
class MemoryBreakdown:
    weights: float
    grads: float
    optimizer: float
    activations: float

    @property
    def total(self) -> float:
        return self.weights + self.grads + self.optimizer + self.activations

    def as_dict(self) -> dict[str, float]:
        return {
            "weights": self.weights,
            "grads": self.grads,
            "optimizer": self.optimizer,
            "activations": self.activations,
            "total": self.total,
        }

    def dominant_term(self) -> str:
        parts = {
            "weights": self.weights,
            "grads": self.grads,
            "optimizer": self.optimizer,
            "activations": self.activations,
        }
        return max(parts, key=lambda k: parts[k])


@dataclass(frozen=True)
class PlanViolation:
    constraint: str
    message: str

    def as_dict(self) -> dict[str, str]:
        return {"constraint": self.constraint, "message": self.message}


def partition_layers(model: ModelSpec, pp: int, balance: str = "uniform") -> list[int]:
    """Split decoder layers over pp stages.

    Uniform mode differs by at most one layer, extras to the earliest
    stages. Cost-balanced mode minimizes the max per-stage cost under a
    parameter-MAC proxy where the first stage carries an embedding extra
    and the last a head extra (both hidden*vocab MACs), so both ends get
    fewer layers than uniform; the exact integer min-max is found by
    bisection on the stage cost bound.
    """
    layers = model.lm.layers
    if pp < 1:
        raise ValueError("pp must be >= 1")
    if pp > layers:
        raise ValueError(f"pp {pp} exceeds layer count {layers}")
    if balance not in LAYER_BALANCE_MODES:
        raise ValueError(f"unknown layer balance mode {balance!r}")

    if balance == "uniform":
        base, rem = divmod(layers, pp)
        return [base + 1] * rem + [base] * (pp - rem)

    per_layer = lm_layer_param_count(model.lm)
    boundary = model.lm.hidden_size * model.lm.vocab_size
    extras = [0] * pp
    extras[0] += boundary
    extras[-1] += boundary

    def capacity(bound: int) -> list[int] | None:
        counts = []
        for extra in extras:
            cap = (bound - extra) // per_layer
            if cap < 1:
                return None
            counts.append(min(cap, layers))
        return counts if sum(counts) >= layers else None

    lo, hi = per_layer, layers * per_layer + max(extras)
    while lo < hi:
        mid = (lo + hi) // 2
        if capacity(mid) is not None:
            hi = mid
        else:
            lo = mid + 1
    counts = capacity(lo)
    assert counts is not None
    excess = sum(counts) - layers
    while excess > 0:
        # shave the costliest stage; rightmost wins ties for determinism
        best = None
        for i in range(pp):
            if counts[i] <= 1:
                continue
            cost = counts[i] * per_layer + extras[i]
            if best is None or cost >= best[0]:
                best = (cost, i)
        assert best is not None
        counts[best[1]] -= 1
        excess -= 1
    return counts


def stage_local_params(
    model: ModelSpec, partition: list[int], stage_index: int
) -> dict[str, int]:
    """Per-component params owned by one pipeline stage (before TP sharding).

    The first stage owns input embeddings, vision encoder, and adapter; the
    last owns the output head unless embeddings are tied (then it is counted
    once, on the first stage).
    """
    lm = model.lm
    counts = {"vision": 0, "adapter": 0, "lm": 0}
    counts["lm"] = partition[stage_index] * lm_layer_param_count(lm)
    if stage_index == 0:
        counts["vision"] = vision_param_count(model.vision)
        counts["adapter"] = adapter_param_count(model.adapter)
        counts["lm"] += lm.hidden_size * lm.vocab_size
    if stage_index == len(partition) - 1 and not lm.embedding_tying:
        counts["lm"] += lm.hidden_size * lm.vocab_size
    return counts


def memory_per_chip(
    model: ModelSpec,
    plan: ParallelismPlan,
    stage: TrainingStage,
    seq_len: int,
    microbatch: int,
) -> MemoryBreakdown:
    """Memory high-water estimate for the deepest (first) pipeline stage."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    if microbatch < 0:
        raise ValueError("microbatch must be >= 0")

    partition = partition_layers(model, plan.pp, plan.layer_balance)
    local = stage_local_params(model, partition, 0)
    total_params = sum(local.values())
    trainable_params = sum(local[c] for c in local if c in stage.trainable)

    tp = plan.tp
    weights = total_params * 2.0 / tp
    grads = trainable_params * 2.0 / tp
    optimizer = trainable_params * 12.0 / tp
    if plan.distributed_optimizer:
        optimizer /= plan.dp

    h = model.lm.hidden_size
    sp_div = tp if plan.sequence_parallel else 1
    if plan.recompute == "full":
        per_token = 2.0 * h / sp_div
        scores = 0.0
    else:
        per_token = 24.0 * h / tp + 10.0 * h / sp_div
        if plan.recompute == "selective":
            scores = 0.0
        else:
            scores = 2.0 * model.lm.query_heads * float(seq_len) ** 2 * microbatch / tp
    tokens = float(microbatch * seq_len)
    in_flight = min(plan.pp, plan.microbatches_per_step)
    activations = partition[0] * (tokens * per_token + scores) * in_flight

    return MemoryBreakdown(
        weights=weights, grads=grads, optimizer=optimizer, activations=activations
    )


def validate_plan(
    topology: Topology,
    plan: ParallelismPlan,
    model: ModelSpec,
    stage: TrainingStage | None = None,
    seq_len: int | None = None,
    microbatch: int | None = None,
) -> list[PlanViolation]:
    """Check a plan against a topology; returns violations as data.

    Structural checks always run. The memory-fit check runs only when the
    workload context (stage, seq_len, microbatch) is supplied.
    """
    violations = []
    chips = topology.total_chips
    product = plan.dp * plan.tp * plan.pp
    if product != chips:
        violations.append(
            PlanViolation(
                constraint="parallelism-product",
                message=f"dp*tp*pp = {product} does not equal total chips {chips}",
            )
        )
    if plan.tp > topology.chips_per_node:
        violations.append(
            PlanViolation(
                constraint="tp-within-node",
                message=(
                    f"tp {plan.tp} exceeds chips per node "
                    f"{topology.chips_per_node}"
                ),
            )
        )
    elif topology.chips_per_node % plan.tp != 0:
        violations.append(
            PlanViolation(
                constraint="tp-within-node",
                message=(
                    f"tp {plan.tp} must divide chips per node "
                    f"{topology.chips_per_node}"
                ),
            )
        )
    if plan.pp > model.lm.layers:
        violations.append(
            PlanViolation(
                constraint="pipeline-depth",
                message=f"pp {plan.pp} exceeds layer count {model.lm.layers}",
            )
        )
        return violations

    if stage is not None and seq_len is not None and microbatch is not None:
        breakdown = memory_per_chip(model, plan, stage, seq_len, microbatch)
        if breakdown.total > topology.chip.memory:
            violations.append(
                PlanViolation(
                    constraint="memory-fit",
                    message=(
                        f"estimated {breakdown.total:.3e} B exceeds chip memory "
                        f"{topology.chip.memory:.3e} B; dominant term is "
                        f"{breakdown.dominant_term()}"
                    ),
                )
            )
    return violations
