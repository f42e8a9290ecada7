"""Config files: strict parsing, dp resolution, canonical form, digests.

A config document is plain JSON. Every key is checked: unknown keys raise
ConfigError naming the JSON path (so a typo like "modle" fails loudly as
`unknown key at $.modle` instead of silently using defaults). Loading
returns a SimConfig of fully built objects; resolved_config_dict renders it
back to a canonical dict with every default filled in and "auto" values
replaced, which is what gets digested and written next to run artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .arch import (
    AdapterSpec,
    LanguageModelSpec,
    ModelSpec,
    VisionEncoderSpec,
    builtin_model_catalog,
    total_param_count,
)
from .cluster import ChipSpec, ParallelismPlan, Topology, validate_plan
from .comm import GradSyncPolicy
from .engine import CostModelConfig
from .workload import SequenceLengthModel, StepWorkload, TrainingStage, stage_by_name


class ConfigError(ValueError):
    def __init__(self, message: str, violations: list | None = None):
        super().__init__(message)
        self.violations = violations or []


@dataclass(frozen=True)
class SimConfig:
    model: ModelSpec
    stage: TrainingStage
    topology: Topology
    plan: ParallelismPlan
    costmodel: CostModelConfig
    workload: StepWorkload
    seed: int
    scaling_reference_chips: int | None = None


_REQUIRED = object()


_ALLOWED_KEYS = {
    "$": {"schema", "model", "stage", "topology", "plan", "costmodel",
          "workload", "seed", "scaling"},
    "model": {"name", "vision", "adapter", "lm", "nominal_params"},
    "vision": {"hidden_size", "layers", "heads", "intermediate_size",
               "patch_size", "tile_side", "tokens_per_tile", "max_tiles"},
    "adapter": {"in_channels", "out_channels"},
    "lm": {"hidden_size", "layers", "kv_heads", "head_size",
           "intermediate_size", "vocab_size", "embedding_tying",
           "context_limit"},
    "topology": {"nodes", "chips_per_node", "intra_node_bw", "inter_node_bw",
                 "intra_latency", "inter_latency", "chip"},
    "chip": {"peak_flops", "memory", "has_independent_comm_unit"},
    "plan": {"dp", "tp", "pp", "microbatches_per_step", "sequence_parallel",
             "recompute", "overlap_grad_sync", "fusion_chunks",
             "distributed_optimizer", "layer_balance"},
    "costmodel": {"grad_sync", "algorithm"},
    "grad_sync": {"precision_bytes", "frequency", "bucket_bytes", "overlap"},
    "workload": {"sequence_length", "microbatch_token_budget",
                 "visual_tokens_per_sample", "padded"},
    "sequence_length": {"kind", "value", "mean", "sigma", "cap"},
    "scaling": {"reference_chips"},
}


class _Section:
    """One dict in the document; tracks which keys were consumed.

    Keys outside the section's allowed set fail immediately (so a typo is
    reported as the typo, not as a missing sibling); keys that are allowed
    somewhere in the section but not consumed on this parse path (say,
    "sigma" on a fixed-length model) fail at finish().
    """

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"expected an object at {path}")
        allowed = _ALLOWED_KEYS.get(path.rpartition(".")[2] or "$")
        if allowed is not None:
            for key in sorted(set(data) - allowed):
                raise ConfigError(f"unknown key at {path}.{key}")
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def _fetch(self, key, default):
        self.seen.add(key)
        if key in self.data:
            return self.data[key]
        if default is _REQUIRED:
            raise ConfigError(f"missing required key at {self.path}.{key}")
        return default

    def take_int(self, key, default=_REQUIRED):
        value = self._fetch(key, default)
        if value is default and key not in self.data:
            return value
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer at {self.path}.{key}")
        return value

    def take_number(self, key, default=_REQUIRED):
        value = self._fetch(key, default)
        if value is default and key not in self.data:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number at {self.path}.{key}")
        return value

    def take_str(self, key, default=_REQUIRED):
        value = self._fetch(key, default)
        if value is default and key not in self.data:
            return value
        if not isinstance(value, str):
            raise ConfigError(f"expected a string at {self.path}.{key}")
        return value

    def take_bool(self, key, default=_REQUIRED):
        value = self._fetch(key, default)
        if value is default and key not in self.data:
            return value
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean at {self.path}.{key}")
        return value

    def take_section(self, key, default=_REQUIRED):
        value = self._fetch(key, default)
        if value is default and key not in self.data:
            return None
        return _Section(value, f"{self.path}.{key}")

    def take_raw(self, key, default=_REQUIRED):
        return self._fetch(key, default)

    def finish(self) -> None:
        unknown = sorted(set(self.data) - self.seen)
        if unknown:
            raise ConfigError(f"unknown key at {self.path}.{unknown[0]}")


def _build(path: str, factory, **kwargs):
    # dataclass validators speak ValueError; reattach the JSON path
    try:
        return factory(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"at {path}: {exc}") from exc


def _parse_model(raw, path: str) -> ModelSpec:
    if isinstance(raw, str):
        catalog = builtin_model_catalog()
        if raw not in catalog:
            raise ConfigError(
                f"unknown model {raw!r} at {path}; "
                f"catalog has {sorted(catalog)}"
            )
        return catalog[raw]
    section = _Section(raw, path)
    name = section.take_str("name", "custom")

    vision_sec = section.take_section("vision", None)
    if vision_sec is None:
        vision = _build(f"{path}.vision", VisionEncoderSpec,
                        hidden_size=1024, layers=24, heads=16,
                        intermediate_size=4096, patch_size=14)
    else:
        vision = _build(
            vision_sec.path,
            VisionEncoderSpec,
            hidden_size=vision_sec.take_int("hidden_size", 1024),
            layers=vision_sec.take_int("layers", 24),
            heads=vision_sec.take_int("heads", 16),
            intermediate_size=vision_sec.take_int("intermediate_size", 4096),
            patch_size=vision_sec.take_int("patch_size", 14),
            tile_side=vision_sec.take_int("tile_side", 448),
            tokens_per_tile=vision_sec.take_int("tokens_per_tile", 256),
            max_tiles=vision_sec.take_int("max_tiles", 12),
        )
        vision_sec.finish()

    lm_sec = section.take_section("lm")
    lm = _build(
        lm_sec.path,
        LanguageModelSpec,
        hidden_size=lm_sec.take_int("hidden_size"),
        layers=lm_sec.take_int("layers"),
        kv_heads=lm_sec.take_int("kv_heads"),
        head_size=lm_sec.take_int("head_size"),
        intermediate_size=lm_sec.take_int("intermediate_size"),
        vocab_size=lm_sec.take_int("vocab_size"),
        embedding_tying=lm_sec.take_bool("embedding_tying"),
        context_limit=lm_sec.take_int("context_limit", 32768),
    )
    lm_sec.finish()

    adapter_sec = section.take_section("adapter", None)
    if adapter_sec is None:
        # pixel-unshuffle merges 2x2 vision tokens into one adapter input
        adapter = _build(f"{path}.adapter", AdapterSpec,
                         in_channels=4 * vision.hidden_size,
                         out_channels=lm.hidden_size)
    else:
        adapter = _build(
            adapter_sec.path,
            AdapterSpec,
            in_channels=adapter_sec.take_int(
                "in_channels", 4 * vision.hidden_size
            ),
            out_channels=adapter_sec.take_int("out_channels", lm.hidden_size),
        )
        adapter_sec.finish()

    partial = ModelSpec(name=name, vision=vision, adapter=adapter, lm=lm,
                        nominal_params=1)
    nominal = section.take_int("nominal_params", total_param_count(partial))
    section.finish()
    return _build(path, ModelSpec, name=name, vision=vision, adapter=adapter,
                  lm=lm, nominal_params=nominal)


def _parse_topology(section: _Section) -> Topology:
    chip_sec = section.take_section("chip")
    chip = _build(
        chip_sec.path,
        ChipSpec,
        peak_flops=chip_sec.take_number("peak_flops"),
        memory=chip_sec.take_number("memory"),
        has_independent_comm_unit=chip_sec.take_bool(
            "has_independent_comm_unit", True
        ),
    )
    chip_sec.finish()
    topology = _build(
        section.path,
        Topology,
        nodes=section.take_int("nodes"),
        chips_per_node=section.take_int("chips_per_node"),
        intra_node_bw=section.take_number("intra_node_bw"),
        inter_node_bw=section.take_number("inter_node_bw"),
        intra_latency=section.take_number("intra_latency"),
        inter_latency=section.take_number("inter_latency"),
        chip=chip,
    )
    section.finish()
    return topology


def _parse_plan(section: _Section, topology: Topology) -> ParallelismPlan:
    dp_raw = section.take_raw("dp")
    tp = section.take_int("tp")
    pp = section.take_int("pp")
    if dp_raw == "auto":
        denom = tp * pp
        if topology.total_chips % denom != 0:
            raise ConfigError(
                f"at {section.path}.dp: cannot resolve \"auto\", "
                f"{topology.total_chips} chips not divisible by tp*pp = {denom}"
            )
        dp = topology.total_chips // denom
    elif isinstance(dp_raw, int) and not isinstance(dp_raw, bool):
        dp = dp_raw
    else:
        raise ConfigError(
            f'expected an integer or "auto" at {section.path}.dp'
        )
    plan = _build(
        section.path,
        ParallelismPlan,
        dp=dp,
        tp=tp,
        pp=pp,
        microbatches_per_step=section.take_int("microbatches_per_step"),
        sequence_parallel=section.take_bool("sequence_parallel", False),
        recompute=section.take_str("recompute", "none"),
        overlap_grad_sync=section.take_bool("overlap_grad_sync", True),
        fusion_chunks=section.take_int("fusion_chunks", 1),
        distributed_optimizer=section.take_bool("distributed_optimizer", False),
        layer_balance=section.take_str("layer_balance", "uniform"),
    )
    section.finish()
    return plan


def _parse_costmodel(section: _Section | None) -> CostModelConfig:
    if section is None:
        return CostModelConfig()
    sync_sec = section.take_section("grad_sync", None)
    if sync_sec is None:
        policy = GradSyncPolicy()
    else:
        policy = _build(
            sync_sec.path,
            GradSyncPolicy,
            precision_bytes=sync_sec.take_int("precision_bytes", 2),
            frequency=sync_sec.take_str("frequency", "per_step"),
            bucket_bytes=sync_sec.take_number("bucket_bytes", 64 * 2**20),
            overlap=sync_sec.take_bool("overlap", True),
        )
        sync_sec.finish()
    cost = _build(
        section.path,
        CostModelConfig,
        grad_sync=policy,
        algorithm=section.take_str("algorithm", "ring"),
    )
    section.finish()
    return cost


def _parse_seq_model(raw, path: str) -> SequenceLengthModel | None:
    if raw is None:
        return None
    section = _Section(raw, path)
    kind = section.take_str("kind")
    if kind == "fixed":
        model = _build(
            path,
            SequenceLengthModel,
            kind="fixed",
            value=section.take_int("value"),
            cap=section.take_int("cap", 32768),
        )
    elif kind == "lognormal-truncated":
        model = _build(
            path,
            SequenceLengthModel,
            kind=kind,
            mean=section.take_number("mean"),
            sigma=section.take_number("sigma"),
            cap=section.take_int("cap", 32768),
        )
    else:
        raise ConfigError(f"unknown sequence length kind {kind!r} at {path}")
    section.finish()
    return model


def _parse_workload(section: _Section) -> StepWorkload:
    seq_model = _parse_seq_model(
        section.take_raw("sequence_length", None),
        f"{section.path}.sequence_length",
    )
    workload = _build(
        section.path,
        StepWorkload,
        microbatch_token_budget=section.take_int("microbatch_token_budget"),
        seq_len_model=seq_model,
        visual_tokens_per_sample=section.take_int("visual_tokens_per_sample", 0),
        padded=section.take_bool("padded", True),
    )
    section.finish()
    return workload


def load_config(source) -> SimConfig:
    """Parse and validate a config from a file path or an in-memory dict."""
    if isinstance(source, (str, Path)):
        try:
            with open(source) as handle:
                doc = json.load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    else:
        doc = source

    root = _Section(doc, "$")
    schema = root.take_int("schema", 1)
    if schema != 1:
        raise ConfigError(f"unsupported schema {schema} at $.schema")

    model = _parse_model(root.take_raw("model"), "$.model")

    stage_name = root.take_str("stage")
    try:
        stage = stage_by_name(stage_name)
    except KeyError as exc:
        raise ConfigError(f"at $.stage: {exc.args[0]}") from exc

    topology = _parse_topology(root.take_section("topology"))
    plan = _parse_plan(root.take_section("plan"), topology)
    costmodel = _parse_costmodel(root.take_section("costmodel", None))
    workload = _parse_workload(root.take_section("workload"))
    seed = root.take_int("seed", 0)

    scaling_sec = root.take_section("scaling", None)
    if scaling_sec is None:
        reference = None
    else:
        reference = scaling_sec.take_int("reference_chips")
        scaling_sec.finish()
        if reference < 1:
            raise ConfigError("at $.scaling.reference_chips: must be >= 1")
    root.finish()

    violations = validate_plan(topology, plan, model)
    if violations:
        lines = "; ".join(v.message for v in violations)
        raise ConfigError(f"plan does not fit topology: {lines}", violations)

    return SimConfig(
        model=model,
        stage=stage,
        topology=topology,
        plan=plan,
        costmodel=costmodel,
        workload=workload,
        seed=seed,
        scaling_reference_chips=reference,
    )


def resolved_config_dict(config: SimConfig) -> dict:
    """Canonical dict form: every default explicit, "auto" values resolved.

    load_config(resolved_config_dict(c)) reproduces c, and the digest is
    computed over exactly this rendering.
    """
    model = config.model
    seq = config.workload.seq_len_model
    if seq is None:
        seq_doc = None
    elif seq.kind == "fixed":
        seq_doc = {"kind": "fixed", "value": seq.value, "cap": seq.cap}
    else:
        seq_doc = {
            "kind": seq.kind,
            "mean": seq.mean,
            "sigma": seq.sigma,
            "cap": seq.cap,
        }
    doc = {
        "schema": 1,
        "model": {
            "name": model.name,
            "vision": {
                "hidden_size": model.vision.hidden_size,
                "layers": model.vision.layers,
                "heads": model.vision.heads,
                "intermediate_size": model.vision.intermediate_size,
                "patch_size": model.vision.patch_size,
                "tile_side": model.vision.tile_side,
                "tokens_per_tile": model.vision.tokens_per_tile,
                "max_tiles": model.vision.max_tiles,
            },
            "adapter": {
                "in_channels": model.adapter.in_channels,
                "out_channels": model.adapter.out_channels,
            },
            "lm": {
                "hidden_size": model.lm.hidden_size,
                "layers": model.lm.layers,
                "kv_heads": model.lm.kv_heads,
                "head_size": model.lm.head_size,
                "intermediate_size": model.lm.intermediate_size,
                "vocab_size": model.lm.vocab_size,
                "embedding_tying": model.lm.embedding_tying,
                "context_limit": model.lm.context_limit,
            },
            "nominal_params": model.nominal_params,
        },
        "stage": config.stage.name,
        "topology": {
            "nodes": config.topology.nodes,
            "chips_per_node": config.topology.chips_per_node,
            "intra_node_bw": config.topology.intra_node_bw,
            "inter_node_bw": config.topology.inter_node_bw,
            "intra_latency": config.topology.intra_latency,
            "inter_latency": config.topology.inter_latency,
            "chip": {
                "peak_flops": config.topology.chip.peak_flops,
                "memory": config.topology.chip.memory,
                "has_independent_comm_unit": (
                    config.topology.chip.has_independent_comm_unit
                ),
            },
        },
        "plan": {
            "dp": config.plan.dp,
            "tp": config.plan.tp,
            "pp": config.plan.pp,
            "microbatches_per_step": config.plan.microbatches_per_step,
            "sequence_parallel": config.plan.sequence_parallel,
            "recompute": config.plan.recompute,
            "overlap_grad_sync": config.plan.overlap_grad_sync,
            "fusion_chunks": config.plan.fusion_chunks,
            "distributed_optimizer": config.plan.distributed_optimizer,
            "layer_balance": config.plan.layer_balance,
        },
        "costmodel": {
            "grad_sync": {
                "precision_bytes": config.costmodel.grad_sync.precision_bytes,
                "frequency": config.costmodel.grad_sync.frequency,
                "bucket_bytes": config.costmodel.grad_sync.bucket_bytes,
                "overlap": config.costmodel.grad_sync.overlap,
            },
            "algorithm": config.costmodel.algorithm,
        },
        "workload": {
            "sequence_length": seq_doc,
            "microbatch_token_budget": config.workload.microbatch_token_budget,
            "visual_tokens_per_sample": (
                config.workload.visual_tokens_per_sample
            ),
            "padded": config.workload.padded,
        },
        "seed": config.seed,
    }
    if config.scaling_reference_chips is not None:
        doc["scaling"] = {"reference_chips": config.scaling_reference_chips}
    return doc


def canonical_config_bytes(config: SimConfig) -> bytes:
    return json.dumps(
        resolved_config_dict(config), sort_keys=True, separators=(",", ":")
    ).encode()


def config_digest(config: SimConfig) -> str:
    """Hex SHA-256 of the canonical resolved config rendering."""
    return hashlib.sha256(canonical_config_bytes(config)).hexdigest()
