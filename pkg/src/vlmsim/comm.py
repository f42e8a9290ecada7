"""Analytic collective cost models and gradient-sync accounting.

Ring alpha-beta algebra only: time = bandwidth term + per-hop latency term.
The useful identity allreduce = allgather + reducescatter holds exactly and
is pinned by tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .arch import ModelSpec
from .cluster import ParallelismPlan
from .workload import TrainingStage, trainable_param_count

COLLECTIVE_KINDS = ("allreduce", "allgather", "reducescatter", "p2p")


@dataclass(frozen=True)
class CollectiveCostModel:
    latency_per_hop: float
    bandwidth: float
    algorithm: str = "ring"

    def __post_init__(self) -> None:
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_per_hop < 0:
            raise ValueError("latency must be >= 0")
        if self.algorithm != "ring":
            raise ValueError(f"unsupported algorithm {self.algorithm!r}")


def collective_time(
    kind: str,
    payload_bytes: float,
    participants: int,
    model: CollectiveCostModel,
) -> float:
    """Ring collective completion time in seconds; 0 for a lone participant."""
    if kind not in COLLECTIVE_KINDS:
        raise ValueError(f"unknown collective kind {kind!r}")
    if participants < 1:
        raise ValueError("participants must be >= 1")
    if payload_bytes < 0:
        raise ValueError("payload must be >= 0")
    n = participants
    if n == 1:
        return 0.0
    bw = model.bandwidth
    lat = model.latency_per_hop
    if kind == "allreduce":
        return 2.0 * (n - 1) / n * payload_bytes / bw + 2.0 * (n - 1) * lat
    if kind in ("allgather", "reducescatter"):
        return (n - 1) / n * payload_bytes / bw + (n - 1) * lat
    return payload_bytes / bw + lat  # p2p


@dataclass(frozen=True)
class GradSyncPolicy:
    precision_bytes: int = 2
    frequency: str = "per_step"  # or "per_microbatch"
    bucket_bytes: float = 64 * 2**20
    overlap: bool = True

    def __post_init__(self) -> None:
        if self.precision_bytes not in (2, 4):
            raise ValueError("precision_bytes must be 2 or 4")
        if self.frequency not in ("per_step", "per_microbatch"):
            raise ValueError(f"unknown sync frequency {self.frequency!r}")
        if self.bucket_bytes <= 0:
            raise ValueError("bucket_bytes must be positive")


def grad_sync_volume(
    model: ModelSpec,
    stage: TrainingStage,
    plan: ParallelismPlan,
    policy: GradSyncPolicy,
) -> float:
    """Bytes each chip pushes through gradient sync per optimizer step.

    Local gradient bytes are trainable params averaged over the tp*pp grid
    (pipeline stages own different slices; this op reports the per-chip
    mean). Per-microbatch sync moves the full set once per microbatch.
    """
    local_params = trainable_param_count(model, stage) / (plan.tp * plan.pp)
    volume = policy.precision_bytes * local_params
    if policy.frequency == "per_microbatch":
        volume *= plan.microbatches_per_step
    return volume


def split_buckets(volume: float, bucket_bytes: float) -> list[float]:
    """Split a sync volume into full buckets plus a remainder bucket."""
    if volume <= 0:
        return []
    full = int(volume // bucket_bytes)
    buckets = [float(bucket_bytes)] * full
    remainder = volume - full * bucket_bytes
    if remainder > 0:
        buckets.append(remainder)
    return buckets


@dataclass(frozen=True)
class SyncCost:
    seconds: float
    overlappable: bool


def sync_time(
    volume: float,
    dp: int,
    policy: GradSyncPolicy,
    cost: CollectiveCostModel,
) -> SyncCost:
    """Total allreduce time over all buckets of one sync round."""
    if dp < 1:
        raise ValueError("dp must be >= 1")
    seconds = math.fsum(
        collective_time("allreduce", bucket, dp, cost)
        for bucket in split_buckets(volume, policy.bucket_bytes)
    )
    if dp == 1:
        seconds = 0.0
    return SyncCost(seconds=seconds, overlappable=policy.overlap)
