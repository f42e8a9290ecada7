"""Command line surface: simulate, sweep, validate.

Exit codes: 0 success, 1 validation failure (bad config or plan), 2 I/O
problem, 3 unexpected internal error.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import itertools
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import engine
from .config import (
    ConfigError,
    SimConfig,
    config_digest,
    load_config,
    resolved_config_dict,
)
from .engine import PlanValidationError
from .cluster import validate_plan
from .metrics import (
    CSV_COLUMNS,
    build_report,
    emit_gantt,
    emit_report,
    report_csv_row,
    scaling_efficiency,
    weak_scaling_point,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_INTERNAL = 3

_ARTIFACTS = (
    "report.json",
    "report.csv",
    "trace.jsonl",
    "gantt.svg",
    "resolved_config.json",
)


def _default_out_dir() -> Path:
    return Path(os.environ.get("VLMSIM_OUT", "vlmsim-out"))


def execute(config: SimConfig) -> tuple[engine.Trace, "object"]:
    """Run one config; returns (trace, report).

    When the config carries a scaling reference, a second run at the
    reference chip count (same weak-scaling rule the sweep uses) prices
    the efficiency field.
    """
    trace = engine.run(
        model=config.model,
        stage=config.stage,
        plan=config.plan,
        topology=config.topology,
        costmodel=config.costmodel,
        seed=config.seed,
        workload=config.workload,
    )
    efficiency = None
    if config.scaling_reference_chips is not None:
        reference = config.scaling_reference_chips
        chips = config.topology.total_chips
        if reference == chips:
            efficiency = 1.0
        else:
            ref_topology, ref_plan = weak_scaling_point(
                config.topology, config.plan, reference
            )
            ref_trace = engine.run(
                model=config.model,
                stage=config.stage,
                plan=ref_plan,
                topology=ref_topology,
                costmodel=config.costmodel,
                seed=config.seed,
                workload=config.workload,
            )
            curve = scaling_efficiency(
                [
                    (reference, ref_trace.tokens_per_step / ref_trace.makespan),
                    (chips, trace.tokens_per_step / trace.makespan),
                ],
                reference=reference,
            )
            efficiency = curve.efficiency_at(chips)
    report = build_report(
        trace,
        config.model,
        config.stage,
        config.plan,
        config.topology,
        config_digest=config_digest(config),
        efficiency=efficiency,
    )
    return trace, report


def cmd_simulate(config: SimConfig, out_dir: Path) -> int:
    trace, report = execute(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        for name, content in (
            ("report.json", emit_report(report, "json")),
            ("report.csv", emit_report(report, "csv")),
        ):
            path = out_dir / name
            path.write_text(content)
            written.append(path)
        path = out_dir / "trace.jsonl"
        trace.write_jsonl(path)
        written.append(path)
        path = out_dir / "gantt.svg"
        emit_gantt(trace, path)
        written.append(path)
        path = out_dir / "resolved_config.json"
        path.write_text(
            json.dumps(resolved_config_dict(config), indent=2, sort_keys=True)
            + "\n"
        )
        written.append(path)
    except OSError:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        raise
    return EXIT_OK


def _axis_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_axis(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError(f"axis {spec!r} is not of the form key=v1,v2,...")
    key, _, values = spec.partition("=")
    if not key or not values:
        raise ConfigError(f"axis {spec!r} is not of the form key=v1,v2,...")
    return key, [_axis_value(v) for v in values.split(",")]


def _check_key_path(doc: dict, dotted: str) -> None:
    node = doc
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"axis key {dotted!r} not present in config")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"axis key {dotted!r} not present in config")


def _set_by_path(doc: dict, dotted: str, value) -> None:
    # the path was validated against the resolved schema; intermediate
    # sections a sparse config omitted are created on the way down
    node = doc
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _point_dir_name(assignment: tuple[tuple[str, object], ...]) -> str:
    return "__".join(f"{key}={value}" for key, value in assignment)


def _run_sweep_point(doc_json: str, out_dir: str) -> None:
    # module-level so process pools can pickle the call
    config = load_config(json.loads(doc_json))
    cmd_simulate(config, Path(out_dir))


def cmd_sweep(
    doc: dict,
    axes: list[tuple[str, list]],
    out_dir: Path,
    parallel: int = 1,
) -> int:
    """Cartesian sweep. Overrides land on the raw document, so values the
    base config left symbolic (dp: "auto") re-resolve per point."""
    base_config = load_config(copy.deepcopy(doc))
    if not axes:
        return cmd_simulate(base_config, out_dir)

    schema_doc = resolved_config_dict(base_config)
    for key, values in axes:
        if not values:
            raise ConfigError(f"axis {key!r} has no values")
        _check_key_path(schema_doc, key)

    points = []
    for combo in itertools.product(*(values for _, values in axes)):
        assignment = tuple(zip((key for key, _ in axes), combo))
        point_doc = copy.deepcopy(doc)
        for key, value in assignment:
            _set_by_path(point_doc, key, value)
        points.append((assignment, point_doc))

    jobs = [
        (json.dumps(doc), str(out_dir / _point_dir_name(assignment)))
        for assignment, doc in points
    ]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            list(pool.map(_run_sweep_point, *zip(*jobs)))
    else:
        for doc_json, point_dir in jobs:
            _run_sweep_point(doc_json, point_dir)

    axis_keys = [key for key, _ in axes]
    lines = [",".join(axis_keys + CSV_COLUMNS)]
    for assignment, _ in points:
        point_dir = out_dir / _point_dir_name(assignment)
        with open(point_dir / "report.json") as handle:
            doc = json.load(handle)
        memory = doc.pop("memory")
        for mkey, mvalue in memory.items():
            doc[f"memory_{mkey}"] = mvalue
        row = [str(value) for _, value in assignment]
        for col in CSV_COLUMNS:
            value = doc[col]
            row.append(
                "" if value is None
                else repr(value) if isinstance(value, float)
                else str(value)
            )
        lines.append(",".join(row))
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_validate(config: SimConfig) -> int:
    seq_model = config.workload.seq_len_model or config.stage.seq_len_model
    budget = config.workload.microbatch_token_budget
    if seq_model.kind == "fixed":
        seq_len = min(seq_model.value, budget)
    else:
        seq_len = min(seq_model.cap, budget)
    microbatch = max(budget // seq_len, 1)
    violations = validate_plan(
        config.topology,
        config.plan,
        config.model,
        stage=config.stage,
        seq_len=seq_len,
        microbatch=microbatch,
    )
    if violations:
        print(json.dumps([v.as_dict() for v in violations], indent=2))
        return EXIT_VALIDATION
    print("ok")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmsim",
        description="Deterministic training-infrastructure simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one config, write artifacts")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", default=None)

    sweep = sub.add_parser("sweep", help="Cartesian sweep over config keys")
    sweep.add_argument("--config", required=True)
    sweep.add_argument(
        "--axis",
        action="append",
        default=[],
        metavar="key=v1,v2,...",
        help="dotted config key and comma-separated values; repeatable",
    )
    sweep.add_argument("--out", default=None)
    sweep.add_argument("--parallel", type=int, default=1)

    val = sub.add_parser("validate", help="check a config against its topology")
    val.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config_path = Path(args.config)
        if not config_path.exists():
            print(f"error: config {config_path} not found", file=sys.stderr)
            return EXIT_IO

        if args.command == "sweep":
            out_dir = Path(args.out) if args.out else _default_out_dir()
            with open(config_path) as handle:
                doc = json.load(handle)
            axes = [parse_axis(spec) for spec in args.axis]
            return cmd_sweep(doc, axes, out_dir, parallel=args.parallel)

        config = load_config(config_path)
        if getattr(args, "seed", None) is not None:
            config = dataclasses.replace(config, seed=args.seed)
        if args.command == "validate":
            return cmd_validate(config)
        out_dir = Path(args.out) if args.out else _default_out_dir()
        return cmd_simulate(config, out_dir)
    except ConfigError as exc:
        if exc.violations:
            print(
                json.dumps([v.as_dict() for v in exc.violations], indent=2),
                file=sys.stderr,
            )
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PlanValidationError as exc:
        print(
            json.dumps([v.as_dict() for v in exc.violations], indent=2),
            file=sys.stderr,
        )
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
