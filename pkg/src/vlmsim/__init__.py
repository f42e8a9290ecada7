"""Deterministic simulator for large multimodal training runs.

Models a 3D-parallel (data / tensor / pipeline) training step over a chip
cluster: 1F1B pipeline scheduling, ring collectives under an alpha-beta
cost model, sequence parallelism, selective recomputation, bucketed
gradient sync with compute overlap, and chunked allgather+GEMM fusion.
Everything is analytic and seeded, so runs are bit-reproducible and large
clusters simulate in seconds.
"""

from .arch import (
    AdapterSpec,
    LanguageModelSpec,
    ModelSpec,
    TilingPolicy,
    VisionEncoderSpec,
    builtin_model_catalog,
    component_param_counts,
    step_flops,
    tile_grid,
    total_param_count,
    visual_token_count,
)
from .cluster import (
    ChipSpec,
    MemoryBreakdown,
    ParallelismPlan,
    PlanViolation,
    Topology,
    memory_per_chip,
    partition_layers,
    validate_plan,
)
from .comm import (
    CollectiveCostModel,
    GradSyncPolicy,
    collective_time,
    grad_sync_volume,
    sync_time,
)
from .config import (
    ConfigError,
    SimConfig,
    config_digest,
    load_config,
    resolved_config_dict,
)
from .engine import (
    CostBook,
    CostModelConfig,
    PlanValidationError,
    Trace,
    fused_allgather_gemm_time,
    run,
    step_training_flops,
)
from .metrics import (
    RunReport,
    ScalingCurve,
    build_report,
    emit_gantt,
    emit_report,
    mfu,
    overlap_efficiency,
    scaling_efficiency,
    weak_scaling_point,
)
from .schedule import (
    BubbleStats,
    PipelineSchedule,
    analytic_bubble,
    build_1f1b,
    build_gpipe,
    check_schedule,
    max_in_flight,
    measured_bubble,
    min_microbatches_for_bubble,
)
from .workload import (
    SequenceLengthModel,
    StepWorkload,
    TrainingStage,
    pack_dynamic_batches,
    plan_step_microbatches,
    sample_lengths,
    stage_by_name,
    stage_catalog,
    trainable_param_count,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec",
    "BubbleStats",
    "ChipSpec",
    "CollectiveCostModel",
    "ConfigError",
    "CostBook",
    "CostModelConfig",
    "GradSyncPolicy",
    "LanguageModelSpec",
    "MemoryBreakdown",
    "ModelSpec",
    "ParallelismPlan",
    "PipelineSchedule",
    "PlanValidationError",
    "PlanViolation",
    "RunReport",
    "ScalingCurve",
    "SequenceLengthModel",
    "SimConfig",
    "StepWorkload",
    "TilingPolicy",
    "Topology",
    "Trace",
    "TrainingStage",
    "VisionEncoderSpec",
    "analytic_bubble",
    "build_1f1b",
    "build_gpipe",
    "build_report",
    "builtin_model_catalog",
    "check_schedule",
    "collective_time",
    "component_param_counts",
    "config_digest",
    "emit_gantt",
    "emit_report",
    "fused_allgather_gemm_time",
    "grad_sync_volume",
    "load_config",
    "max_in_flight",
    "measured_bubble",
    "memory_per_chip",
    "mfu",
    "min_microbatches_for_bubble",
    "overlap_efficiency",
    "pack_dynamic_batches",
    "partition_layers",
    "plan_step_microbatches",
    "resolved_config_dict",
    "run",
    "sample_lengths",
    "scaling_efficiency",
    "stage_by_name",
    "stage_catalog",
    "step_flops",
    "step_training_flops",
    "sync_time",
    "tile_grid",
    "total_param_count",
    "trainable_param_count",
    "validate_plan",
    "visual_token_count",
    "weak_scaling_point",
]
