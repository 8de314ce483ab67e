"""Command line entry point: ``seqpipe <command> ...``.

Exit codes: 0 ok, 1 runtime error, 2 usage error, 3 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from .core import PRESET_TABLE, ScenarioConfig, config_from_mapping, load_config, tomllib
from .gantt import render_ascii, render_svg
from .partition import balance_report, cwp_partition, even_partition, oracle_partition
from .schedules import Schedule, ScheduleKind, generate
from .simengine import SimReport, compare, simulate
from .validate import check_schedule, check_warmup_formulas

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_INVALID = 0, 1, 2, 3

SWEEP_COLUMNS = (
    "status",
    "kind",
    "pipeline_size",
    "stages_per_device",
    "micro_batches",
    "segments",
    "seq_len",
    "partition",
    "makespan",
    "bubble_ratio",
    "max_peak_memory",
    "modeled_throughput",
)


class ValidationFailed(Exception):
    def __init__(self, text: str):
        super().__init__("schedule failed validation")
        self.text = text


def _kind(text: str) -> ScheduleKind:
    try:
        return ScheduleKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _kinds(text: str) -> list[ScheduleKind]:
    return [_kind(t) for t in _split(text)]


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in _split(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _setting(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="flat TOML scenario file")
    p.add_argument("--preset", choices=sorted(PRESET_TABLE), help="start from a named model setup")
    p.add_argument("--set", dest="settings", action="append", type=_setting, default=[], metavar="KEY=VALUE")


def _config(args: argparse.Namespace) -> ScenarioConfig:
    if args.config and args.preset:
        raise ValueError("give either a config file or --preset, not both")
    overrides = dict(args.settings)
    if args.config:
        base = load_config(args.config).to_dict()
        base.update(overrides)
        return config_from_mapping(base)
    if args.preset:
        return config_from_mapping({"preset": args.preset, **overrides})
    return config_from_mapping(overrides)


def _partition_for(cfg: ScenarioConfig, kind: ScheduleKind, method: str):
    k = cfg.segments if kind.is_sequence else 1
    if k == 1:
        return None
    return even_partition(cfg.seq_len, k, cfg) if method == "even" else cwp_partition(cfg)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _run(cfg: ScenarioConfig, kind: ScheduleKind, method: str, validate: bool = False) -> SimReport:
    part = _partition_for(cfg, kind, method)
    schedule = generate(cfg, kind, part)
    if validate:
        verdict = check_schedule(schedule, cfg)
        if not verdict.ok:
            raise ValidationFailed(verdict.to_json())
    return simulate(schedule, cfg, part)


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    report = _run(cfg, args.kind, args.partition, args.validate)
    data = report.to_dict(args.memory_stride)
    if args.stamp:
        data["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    _write(args.out, json.dumps(data, indent=1) + "\n")
    if args.gantt:
        text = render_svg(report) if args.gantt == "svg" else render_ascii(report)
        _write(args.gantt_out, text)
    return EXIT_OK


def _sweep_row(job: tuple[ScenarioConfig | str, ScheduleKind, dict[str, int], str]) -> dict[str, Any]:
    cfg, kind, point, method = job
    row: dict[str, Any] = {c: "" for c in SWEEP_COLUMNS}
    row.update(kind=kind.value, **point)
    if isinstance(cfg, str):
        row["status"] = f"skip:{cfg}"
        return row
    try:
        report = _run(cfg, kind, method)
    except ValueError as exc:
        row["status"] = f"skip:{exc}"
        return row
    row.update(
        status="ok",
        partition=" ".join(str(n) for n in report.partition.lengths),
        makespan=format(float(report.makespan), ".10g"),
        bubble_ratio=format(float(report.bubble_ratio), ".10g"),
        max_peak_memory=format(float(report.max_peak_memory), ".10g"),
        modeled_throughput=format(float(report.modeled_throughput), ".10g"),
    )
    return row


def sweep_jobs(base: ScenarioConfig, grid: dict[str, list[int]], kinds: list[ScheduleKind], method: str) -> list[tuple]:
    names = ["pipeline_size", "stages_per_device", "micro_batches", "segments", "seq_len"]
    axes = [grid[n] if n in grid else [getattr(base, n)] for n in names]
    jobs = []
    if not kinds or any(axis == [] for axis in axes):
        return jobs
    for values in itertools.product(*axes):
        point = dict(zip(names, values))
        try:
            cfg: ScenarioConfig | str = base.with_(**point)
        except ValueError as exc:
            cfg = str(exc)
        for kind in kinds:
            jobs.append((cfg, kind, point, method))
    return jobs


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _config(args)
    grid = {
        "pipeline_size": args.pipeline_sizes,
        "stages_per_device": args.stages_per_device,
        "micro_batches": args.micro_batches,
        "segments": args.segments,
        "seq_len": args.seq_lens,
    }
    # None keeps the base value; an explicitly empty list empties the grid
    grid = {k: v for k, v in grid.items() if v is not None}
    jobs = sweep_jobs(base, grid, args.kinds, args.partition)
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(job) for job in jobs]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write(args.out, buf.getvalue())
    return EXIT_OK


def cmd_partition(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if args.segments is not None:
        cfg = cfg.with_(segments=args.segments)
    if args.method == "even":
        part = even_partition(cfg.seq_len, cfg.segments, cfg)
    elif args.method == "oracle":
        part = oracle_partition(cfg)
    else:
        part = cwp_partition(cfg)
    data = {"method": args.method, "seq_len": cfg.seq_len, "segments": cfg.segments}
    data.update(balance_report(part, cfg).to_dict())
    _write(args.out, json.dumps(data, indent=1) + "\n")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    schedule = generate(cfg, args.kind, _partition_for(cfg, args.kind, args.partition))
    _write(args.out, schedule.to_json())
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    schedule = Schedule.from_json(Path(args.schedule).read_text())
    verdict = check_schedule(schedule)
    violations = list(verdict.violations)
    if args.warmup:
        violations.extend(check_warmup_formulas(schedule).violations)
    text = json.dumps({"ok": not violations, "violations": [v.to_dict() for v in violations]}, indent=1) + "\n"
    if violations:
        sys.stderr.write(text)
        return EXIT_INVALID
    _write(args.out, text)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _config(args)
    reports = []
    for kind in args.kinds:
        kind_cfg = cfg.with_(stages_per_device=args.interleave if kind.is_interleaved else 1)
        reports.append(_run(kind_cfg, kind, args.partition))
    _write(args.out, compare(reports).to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqpipe", description="Pipeline schedule generation and simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one schedule and write a JSON report")
    _add_config_args(p)
    p.add_argument("--kind", type=_kind, required=True)
    p.add_argument("--partition", choices=("cwp", "even"), default="cwp")
    p.add_argument("--validate", action="store_true", help="check the schedule before simulating")
    p.add_argument("--gantt", choices=("svg", "ascii"))
    p.add_argument("--gantt-out", help="timeline destination (default stdout)")
    p.add_argument("--memory-stride", type=int, default=None, help="keep every Nth memory sample")
    p.add_argument("--stamp", action="store_true", help="add a generation timestamp")
    p.add_argument("--out", help="report destination (default stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="simulate a grid of configurations into CSV")
    _add_config_args(p)
    p.add_argument("--kinds", type=_kinds, default=[ScheduleKind.ONE_F_ONE_B, ScheduleKind.SEQ1F1B])
    p.add_argument("--pipeline-sizes", type=_ints)
    p.add_argument("--stages-per-device", type=_ints)
    p.add_argument("--micro-batches", type=_ints)
    p.add_argument("--segments", type=_ints)
    p.add_argument("--seq-lens", type=_ints)
    p.add_argument("--partition", choices=("cwp", "even"), default="cwp")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("partition", help="split the sequence and report per-segment costs")
    _add_config_args(p)
    p.add_argument("--segments", type=int)
    p.add_argument("--method", choices=("cwp", "even", "oracle"), default="cwp")
    p.add_argument("--out")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("generate", help="write a schedule as JSON")
    _add_config_args(p)
    p.add_argument("--kind", type=_kind, required=True)
    p.add_argument("--partition", choices=("cwp", "even"), default="cwp")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", help="check a schedule JSON file")
    p.add_argument("schedule")
    p.add_argument("--warmup", action="store_true", help="also compare warm-up counts with the closed forms")
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="tabulate several kinds on one configuration")
    _add_config_args(p)
    p.add_argument("--kinds", type=_kinds, required=True)
    p.add_argument("--interleave", type=int, default=2, help="stages per device for interleaved kinds")
    p.add_argument("--partition", choices=("cwp", "even"), default="cwp")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationFailed as exc:
        sys.stderr.write(exc.text)
        return EXIT_INVALID
    except (ValueError, TypeError, OSError, tomllib.TOMLDecodeError) as exc:
        sys.stderr.write(f"seqpipe: error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
