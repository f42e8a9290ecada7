"""Deterministic discrete-event simulation of one training step.

Each chip has two resources, a compute unit and a communication unit,
reflecting hardware where the two are physically separate and bypass
streams let transfers run beside matrix work. With
`chip.has_independent_comm_unit` off, every transfer serializes onto the
compute timeline instead, which models a conventional single-stream chip
and is the baseline for the overlap comparisons.

Cost construction and timing rules, in one place:

  * compute durations are exact FLOP counts (shared with the arch module)
    divided by tp * peak_flops;
  * TP collectives inside a stage are aggregated into one per-slot comm
    lump (2 allgather + 2 reducescatter per layer and direction under
    sequence parallelism, 2 allreduce otherwise), and the lump overlaps
    its slot's compute through the chunked allgather+GEMM fusion pipeline;
  * stage boundary activations travel as p2p events that occupy the
    sender's comm unit only (DMA-style; the receiver just observes the
    arrival time);
  * gradient buckets become ready progressively across the stage's last
    backward (per-step sync) or every backward (per-microbatch sync) and
    queue FIFO on the comm unit when overlapped, else run serially after
    the producing backward;
  * the optimizer update itself is charged zero time.

All DP replicas execute identical work on an identical sampled length
schedule (a documented symmetry), so one replica is simulated at
stage-group granularity and the trace expands lazily to every
(replica, tp-rank) chip. Event times are double-precision seconds and the
whole construction is an arithmetic fold over the schedule, so a given
(inputs, seed) pair is bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .arch import (
    ModelSpec,
    adapter_fwd_flops_per_tile,
    lm_head_fwd_flops_per_token,
    lm_layer_fwd_flops_per_token,
    step_flops,
    vision_fwd_flops_per_tile,
)
from .cluster import (
    ParallelismPlan,
    Topology,
    PlanViolation,
    partition_layers,
    stage_local_params,
    validate_plan,
)
from .comm import (
    CollectiveCostModel,
    GradSyncPolicy,
    collective_time,
    split_buckets,
)
from .schedule import BACKWARD, FORWARD, build_1f1b
from .workload import (
    MicrobatchPlan,
    StepWorkload,
    TrainingStage,
    plan_step_microbatches,
)

COMPUTE = "compute"
COMM = "comm"

LABEL_FWD = "fwd"
LABEL_BWD = "bwd"
LABEL_COLLECTIVE = "collective"
LABEL_P2P = "p2p"
LABEL_SYNC = "sync_bucket"


class PlanValidationError(ValueError):
    def __init__(self, violations: list[PlanViolation]):
        self.violations = violations
        super().__init__("; ".join(v.message for v in violations))


@dataclass(frozen=True)
class CostModelConfig:
    """The comm side of a run: collective algorithm plus sync policy."""

    grad_sync: GradSyncPolicy = field(default_factory=GradSyncPolicy)
    algorithm: str = "ring"

    def __post_init__(self) -> None:
        if self.algorithm != "ring":
            raise ValueError(f"unsupported algorithm {self.algorithm!r}")


def fused_allgather_gemm_time(t_comm: float, t_gemm: float, chunks: int) -> float:
    """Completion time of an allgather+GEMM pair pipelined in equal chunks.

    Each of the k chunks transfers in t_comm/k and multiplies in t_gemm/k;
    chunk j's GEMM needs chunk j's transfer and the previous GEMM, giving
    tc + (k-1)*max(tc, tg) + tg. k=1 is the plain sequential pair.
    """
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    if t_comm < 0 or t_gemm < 0:
        raise ValueError("times must be >= 0")
    if t_comm == 0.0:
        return t_gemm
    if t_gemm == 0.0:
        return t_comm
    tc = t_comm / chunks
    tg = t_gemm / chunks
    return tc + (chunks - 1) * max(tc, tg) + tg


@dataclass(frozen=True)
class CostBook:
    """Per-stage, per-microbatch work and transfer durations (seconds).

    Normally built from the model and topology; tests may inject one to
    run the scheduler over calibrated or synthetic (e.g. uniform) costs.
    Lists are indexed [stage][microbatch]; sync_buckets is [stage][bucket].
    """

    fwd: list[list[float]]
    bwd: list[list[float]]
    tp_fwd: list[list[float]]
    tp_bwd: list[list[float]]
    p2p_fwd: list[list[float]]
    p2p_bwd: list[list[float]]
    sync_buckets: list[list[float]]

    @classmethod
    def uniform(
        cls,
        p: int,
        m: int,
        fwd: float,
        bwd: float,
        tp_comm: float = 0.0,
        p2p: float = 0.0,
    ) -> "CostBook":
        return cls(
            fwd=[[fwd] * m for _ in range(p)],
            bwd=[[bwd] * m for _ in range(p)],
            tp_fwd=[[tp_comm] * m for _ in range(p)],
            tp_bwd=[[tp_comm] * m for _ in range(p)],
            p2p_fwd=[[p2p] * m for _ in range(p)],
            p2p_bwd=[[p2p] * m for _ in range(p)],
            sync_buckets=[[] for _ in range(p)],
        )


Row = tuple[str, float, float, str, int | None]  # resource, start, end, label, mb


@dataclass
class Trace:
    """Interval record of one simulated step, stored at stage-group level.

    A stage group is the set of dp * tp chips executing identical work in
    lockstep; rows expand to per-chip intervals on demand. Chip ids follow
    (replica * pp + stage) * tp + rank.
    """

    dp: int
    tp: int
    pp: int
    makespan: float
    seed: int
    stage_rows: list[list[Row]]
    microbatch_sizes: list[int]
    microbatch_seq_lens: list[int]
    visual_tokens_per_sample: int

    @property
    def num_stages(self) -> int:
        return self.pp

    @property
    def total_chips(self) -> int:
        return self.dp * self.tp * self.pp

    @property
    def microbatch_tokens(self) -> list[int]:
        return [
            size * seq
            for size, seq in zip(self.microbatch_sizes, self.microbatch_seq_lens)
        ]

    @property
    def tokens_per_step(self) -> int:
        return self.dp * sum(self.microbatch_tokens)

    def stage_compute_busy(self) -> list[float]:
        return [
            sum(end - start for res, start, end, _, _ in rows if res == COMPUTE)
            for rows in self.stage_rows
        ]

    def stage_comm_busy(self) -> list[float]:
        return [
            sum(end - start for res, start, end, _, _ in rows if res == COMM)
            for rows in self.stage_rows
        ]

    def chips_of_stage(self, stage: int) -> list[int]:
        return [
            (d * self.pp + stage) * self.tp + r
            for d in range(self.dp)
            for r in range(self.tp)
        ]

    def check_invariants(self) -> None:
        for stage, rows in enumerate(self.stage_rows):
            for resource in (COMPUTE, COMM):
                prev_end = -1.0
                for res, start, end, label, _ in rows:
                    if res != resource:
                        continue
                    if end <= start:
                        raise AssertionError(
                            f"stage {stage} {label} interval not positive"
                        )
                    if start < prev_end - 1e-15:
                        raise AssertionError(
                            f"stage {stage} overlapping {resource} intervals"
                        )
                    prev_end = end

    def iter_intervals(self):
        """Yield (chip, resource, start, end, label, microbatch) per chip."""
        sorted_rows = [
            sorted(rows, key=lambda r: (r[1], 0 if r[0] == COMPUTE else 1, r[2], r[3]))
            for rows in self.stage_rows
        ]
        for chip in range(self.total_chips):
            within = chip % (self.pp * self.tp)
            stage = within // self.tp
            for res, start, end, label, mb in sorted_rows[stage]:
                yield chip, res, start, end, label, mb

    def iter_jsonl_lines(self):
        """One meta line, then one line per stage-group interval.

        The engine simulates at stage-group granularity (every chip of a
        stage holds an identical timeline; DP replicas are bit-identical),
        so the trace records each interval once per stage. Chip membership
        of stage s is chips_of_stage(s); lines are time-sorted per stage.
        """
        yield json.dumps(
            {
                "dp": self.dp,
                "tp": self.tp,
                "pp": self.pp,
                "seed": self.seed,
                "makespan": self.makespan,
                "microbatch_sizes": self.microbatch_sizes,
                "microbatch_seq_lens": self.microbatch_seq_lens,
                "visual_tokens_per_sample": self.visual_tokens_per_sample,
            },
            separators=(",", ":"),
        )
        for stage in range(self.pp):
            rows = sorted(
                self.stage_rows[stage],
                key=lambda r: (r[1], 0 if r[0] == COMPUTE else 1, r[2], r[3]),
            )
            for res, start, end, label, mb in rows:
                yield json.dumps(
                    {
                        "stage": stage,
                        "resource": res,
                        "start": start,
                        "end": end,
                        "label": label,
                        "microbatch": mb,
                    },
                    separators=(",", ":"),
                )

    def write_jsonl(self, path) -> None:
        with open(path, "w") as handle:
            for line in self.iter_jsonl_lines():
                handle.write(line)
                handle.write("\n")


def _link_model(
    topology: Topology, inter_node: bool, algorithm: str
) -> CollectiveCostModel:
    if inter_node:
        return CollectiveCostModel(
            latency_per_hop=topology.inter_latency,
            bandwidth=topology.inter_node_bw,
            algorithm=algorithm,
        )
    return CollectiveCostModel(
        latency_per_hop=topology.intra_latency,
        bandwidth=topology.intra_node_bw,
        algorithm=algorithm,
    )


def _node_of(chip: int, topology: Topology) -> int:
    return chip // topology.chips_per_node

def _dp_group_spans_nodes(topology: Topology, plan: ParallelismPlan) -> bool:
    if plan.dp == 1:
        return False
    nodes = {
        _node_of((d * plan.pp) * plan.tp, topology) for d in range(plan.dp)
    }
    return len(nodes) > 1


def _boundary_crosses_nodes(
    stage: int, topology: Topology, plan: ParallelismPlan
) -> bool:
    a = _node_of(stage * plan.tp, topology)
    b = _node_of((stage + 1) * plan.tp, topology)
    return a != b


def build_cost_book(
    model: ModelSpec,
    stage: TrainingStage,
    plan: ParallelismPlan,
    topology: Topology,
    costmodel: CostModelConfig,
    partition: list[int],
    microbatches: MicrobatchPlan,
    workload: StepWorkload,
) -> CostBook:
    """Translate model arithmetic and link algebra into slot durations."""
    lm = model.lm
    p = plan.pp
    tp = plan.tp
    chip_rate = plan.tp * topology.chip.peak_flops
    intra = _link_model(topology, inter_node=False, algorithm=costmodel.algorithm)

    vision_tile_flops = vision_fwd_flops_per_tile(model.vision) + (
        adapter_fwd_flops_per_tile(model.vision, model.adapter)
    )
    tiles_per_sample = workload.visual_tokens_per_sample / model.vision.tokens_per_tile

    fwd: list[list[float]] = []
    bwd: list[list[float]] = []
    tp_fwd: list[list[float]] = []
    tp_bwd: list[list[float]] = []
    p2p_fwd: list[list[float]] = []
    p2p_bwd: list[list[float]] = []

    for i in range(p):
        layers = partition[i]
        f_row, b_row, tf_row, tb_row, pf_row, pb_row = [], [], [], [], [], []
        for batch in microbatches.batches:
            size = len(batch)
            seq = max(batch)
            tokens = float(size * seq)

            f_flops = tokens * layers * lm_layer_fwd_flops_per_token(lm, seq)
            if i == p - 1:
                f_flops += tokens * lm_head_fwd_flops_per_token(lm)
            if i == 0 and tiles_per_sample > 0:
                f_flops += size * tiles_per_sample * vision_tile_flops

            if plan.recompute == "selective":
                extra = tokens * layers * 4.0 * seq * lm.hidden_size
            elif plan.recompute == "full":
                extra = tokens * layers * lm_layer_fwd_flops_per_token(lm, seq)
            else:
                extra = 0.0
            b_flops = 2.0 * f_flops + extra

            f_row.append(f_flops / chip_rate)
            b_row.append(b_flops / chip_rate)

            if tp > 1:
                activation_bytes = tokens * lm.hidden_size * 2.0
                if plan.sequence_parallel:
                    per_layer = 2.0 * collective_time(
                        "allgather", activation_bytes, tp, intra
                    ) + 2.0 * collective_time(
                        "reducescatter", activation_bytes, tp, intra
                    )
                else:
                    per_layer = 2.0 * collective_time(
                        "allreduce", activation_bytes, tp, intra
                    )
                tf_row.append(layers * per_layer)
                tb_row.append(layers * per_layer)
            else:
                tf_row.append(0.0)
                tb_row.append(0.0)

            boundary_bytes = tokens * lm.hidden_size * 2.0
            if plan.sequence_parallel:
                boundary_bytes /= tp
            if i < p - 1:
                link = _link_model(
                    topology,
                    _boundary_crosses_nodes(i, topology, plan),
                    costmodel.algorithm,
                )
                pf_row.append(collective_time("p2p", boundary_bytes, 2, link))
            else:
                pf_row.append(0.0)
            if i > 0:
                link = _link_model(
                    topology,
                    _boundary_crosses_nodes(i - 1, topology, plan),
                    costmodel.algorithm,
                )
                pb_row.append(collective_time("p2p", boundary_bytes, 2, link))
            else:
                pb_row.append(0.0)
        fwd.append(f_row)
        bwd.append(b_row)
        tp_fwd.append(tf_row)
        tp_bwd.append(tb_row)
        p2p_fwd.append(pf_row)
        p2p_bwd.append(pb_row)

    sync_buckets: list[list[float]] = []
    policy = costmodel.grad_sync
    dp_link = _link_model(
        topology, _dp_group_spans_nodes(topology, plan), costmodel.algorithm
    )
    for i in range(p):
        if plan.dp == 1:
            sync_buckets.append([])
            continue
        local = stage_local_params(model, partition, i)
        trainable = sum(local[c] for c in local if c in stage.trainable)
        volume = trainable / tp * policy.precision_bytes
        sync_buckets.append(
            [
                collective_time("allreduce", b, plan.dp, dp_link)
                for b in split_buckets(volume, policy.bucket_bytes)
            ]
        )
    return CostBook(
        fwd=fwd,
        bwd=bwd,
        tp_fwd=tp_fwd,
        tp_bwd=tp_bwd,
        p2p_fwd=p2p_fwd,
        p2p_bwd=p2p_bwd,
        sync_buckets=sync_buckets,
    )


def run(
    model: ModelSpec,
    stage: TrainingStage,
    plan: ParallelismPlan,
    topology: Topology,
    costmodel: CostModelConfig,
    seed: int,
    workload: StepWorkload | None = None,
    cost_book: CostBook | None = None,
) -> Trace:
    """Simulate one optimizer step; returns the interval trace.

    The plan is validated (including memory fit at the packed microbatch
    shape) before any timing work happens. `cost_book` overrides the
    computed work durations, which is how calibrated or synthetic costs
    are injected; everything else (schedule shape, overlap policy, sync
    placement) is unaffected by the override.
    """
    if workload is None:
        default_budget = (
            stage.seq_len_model.value
            if stage.seq_len_model.kind == "fixed"
            else stage.seq_len_model.cap
        )
        workload = StepWorkload(microbatch_token_budget=default_budget)

    p = plan.pp
    m = plan.microbatches_per_step
    microbatches = plan_step_microbatches(stage.seq_len_model, workload, m, seed)
    peak_size = max(len(b) for b in microbatches.batches)
    peak_seq = max(max(b) for b in microbatches.batches)
    if peak_seq > model.lm.context_limit:
        raise ValueError(
            f"packed sequence length {peak_seq} exceeds context limit "
            f"{model.lm.context_limit}"
        )

    violations = validate_plan(
        topology,
        plan,
        model,
        stage=stage,
        seq_len=peak_seq,
        microbatch=peak_size,
    )
    if violations:
        raise PlanValidationError(violations)

    partition = partition_layers(model, p, plan.layer_balance)
    if cost_book is None:
        cost_book = build_cost_book(
            model, stage, plan, topology, costmodel,
            partition, microbatches, workload,
        )
    elif len(cost_book.fwd) != p or any(len(row) != m for row in cost_book.fwd):
        raise ValueError("injected cost_book shape does not match (pp, microbatches)")

    sched = build_1f1b(p, m)
    dual_stream = topology.chip.has_independent_comm_unit
    overlap_sync = (
        dual_stream and plan.overlap_grad_sync and costmodel.grad_sync.overlap
    )
    per_microbatch_sync = costmodel.grad_sync.frequency == "per_microbatch"
    chunks = plan.fusion_chunks

    stage_rows: list[list[Row]] = [[] for _ in range(p)]
    comp_free = [0.0] * p
    comm_free = [0.0] * p
    fwd_arrival: list[dict[int, float]] = [{} for _ in range(p)]
    bwd_arrival: list[dict[int, float]] = [{} for _ in range(p)]
    fwd_end: list[dict[int, float]] = [{} for _ in range(p)]
    position = [0] * p

    def record(i: int, resource: str, start: float, end: float,
               label: str, mb: int | None) -> None:
        if end > start:
            stage_rows[i].append((resource, start, end, label, mb))

    def execute_slot(i: int, kind: str, k: int, dep: float) -> None:
        mb = k - 1
        comp = cost_book.fwd[i][mb] if kind == FORWARD else cost_book.bwd[i][mb]
        lump = cost_book.tp_fwd[i][mb] if kind == FORWARD else cost_book.tp_bwd[i][mb]
        label = LABEL_FWD if kind == FORWARD else LABEL_BWD

        if dual_stream:
            if lump > 0.0:
                start = max(comp_free[i], comm_free[i], dep)
                span = fused_allgather_gemm_time(lump, comp, chunks)
                record(i, COMM, start, start + lump, LABEL_COLLECTIVE, mb)
                comm_free[i] = start + lump
                tc = lump / chunks
                tg = comp / chunks
                if tc <= tg or comp == 0.0:
                    record(i, COMPUTE, start + tc, start + span, label, mb)
                else:
                    # GEMM chunks gated by transfer chunks, with gaps
                    for j in range(chunks):
                        cs = start + (j + 1) * tc
                        record(i, COMPUTE, cs, cs + tg, label, mb)
                end = start + span
            else:
                start = max(comp_free[i], dep)
                record(i, COMPUTE, start, start + comp, label, mb)
                end = start + comp
            comp_free[i] = end
        else:
            start = max(comp_free[i], dep)
            t = start
            if lump > 0.0:
                record(i, COMM, t, t + lump, LABEL_COLLECTIVE, mb)
                t += lump
            record(i, COMPUTE, t, t + comp, label, mb)
            end = t + comp
            comp_free[i] = end
            comm_free[i] = end

        if kind == FORWARD:
            fwd_end[i][k] = end
            if i < p - 1:
                _send(i, cost_book.p2p_fwd[i][mb], mb, fwd_arrival[i + 1], k)
        else:
            if i > 0:
                _send(i, cost_book.p2p_bwd[i][mb], mb, bwd_arrival[i - 1], k)
            if cost_book.sync_buckets[i] and (
                per_microbatch_sync or k == m
            ):
                _sync(i, comp)

    def _send(i: int, duration: float, mb: int,
              arrival: dict[int, float], k: int) -> None:
        if duration <= 0.0:
            arrival[k] = comp_free[i]
            return
        if dual_stream:
            t0 = max(comp_free[i], comm_free[i])
            record(i, COMM, t0, t0 + duration, LABEL_P2P, mb)
            comm_free[i] = t0 + duration
        else:
            t0 = comp_free[i]
            record(i, COMM, t0, t0 + duration, LABEL_P2P, mb)
            comp_free[i] = t0 + duration
            comm_free[i] = t0 + duration
        arrival[k] = t0 + duration

    def _sync(i: int, producing_compute: float) -> None:
        buckets = cost_book.sync_buckets[i]
        n = len(buckets)
        if overlap_sync:
            # buckets become ready progressively across the producing backward
            produce_end = comp_free[i]
            produce_start = produce_end - producing_compute
            for j, dur in enumerate(buckets):
                ready = produce_start + producing_compute * (j + 1) / n
                t = max(ready, comm_free[i])
                record(i, COMM, t, t + dur, LABEL_SYNC, None)
                comm_free[i] = t + dur
        else:
            # comm unit may still be draining the stage's own p2p send
            t = max(comp_free[i], comm_free[i])
            for dur in buckets:
                record(i, COMM, t, t + dur, LABEL_SYNC, None)
                t += dur
            comp_free[i] = t
            comm_free[i] = t

    remaining = sum(len(s) for s in sched.slots)
    while remaining:
        progressed = False
        for i in range(p):
            slots = sched.slots[i]
            while position[i] < len(slots):
                kind, k = slots[position[i]]
                if kind == FORWARD:
                    dep = 0.0 if i == 0 else fwd_arrival[i].get(k)
                else:
                    if i == p - 1:
                        dep = fwd_end[i].get(k)
                    else:
                        dep = bwd_arrival[i].get(k)
                if dep is None:
                    break
                execute_slot(i, kind, k, dep)
                position[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:  # unreachable for 1F1B; guards future schedules
            raise RuntimeError("simulation deadlocked")

    makespan = max(max(comp_free), max(comm_free))
    trace = Trace(
        dp=plan.dp,
        tp=plan.tp,
        pp=p,
        makespan=makespan,
        seed=seed,
        stage_rows=stage_rows,
        microbatch_sizes=[len(b) for b in microbatches.batches],
        microbatch_seq_lens=[max(b) for b in microbatches.batches],
        visual_tokens_per_sample=workload.visual_tokens_per_sample,
    )
    trace.check_invariants()
    return trace


def step_training_flops(trace: Trace, model: ModelSpec, plan: ParallelismPlan) -> float:
    """Whole-cluster training FLOPs for the traced step."""
    total = 0.0
    for size, seq in zip(trace.microbatch_sizes, trace.microbatch_seq_lens):
        total += step_flops(
            model,
            size,
            seq,
            visual_tokens=trace.visual_tokens_per_sample,
            recompute=plan.recompute,
        )
    return total * trace.dp
