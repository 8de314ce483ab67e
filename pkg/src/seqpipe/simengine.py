"""Deterministic execution of a schedule against the cost model.

Each device runs its task list strictly in order. A task starts once the
device is free and every dependency has finished (plus ``comm_latency`` when
the dependency ran on another device). Times are exact rationals.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Any, Iterable, Sequence

from .core import (
    ScenarioConfig,
    SequencePartition,
    Task,
    TaskKind,
    fraction_str,
    make_task,
    task_cost,
)
from .partition import cwp_partition

if TYPE_CHECKING:
    from .schedules import Schedule


class SimulationError(RuntimeError):
    pass


class IncompleteScheduleError(SimulationError):
    """A task depends on a task that the schedule never runs."""

    def __init__(self, task: Task, missing: Task):
        super().__init__(f"{task} depends on {missing}, which is not in the schedule")
        self.task = task
        self.missing = missing


class DeadlockError(SimulationError):
    """No device can make progress; ``cycle`` lists the tasks waiting on each other."""

    def __init__(self, cycle: list[Task], remaining: int):
        chain = " -> ".join(str(t) for t in cycle)
        super().__init__(f"deadlock with {remaining} tasks left; wait cycle: {chain}")
        self.cycle = cycle
        self.remaining = remaining


def dependencies(task: Task, cfg: ScenarioConfig, segments: int | None = None) -> frozenset[Task]:
    """Tasks that must finish before ``task`` may start.

    Forwards follow the previous stage and the previous segment (causal
    attention needs keys/values of earlier tokens). Backwards follow the next
    stage, the next segment and the matching forward. A weight gradient
    follows its input gradient.
    """
    k = cfg.segments if segments is None else segments
    m, s, v = task.micro_batch, task.segment, task.stage
    last_stage = cfg.total_stages
    deps = []
    if task.kind is TaskKind.FORWARD:
        if v > 1:
            deps.append(make_task(TaskKind.FORWARD, m, s, v - 1, cfg))
        if s > 1:
            deps.append(make_task(TaskKind.FORWARD, m, s - 1, v, cfg))
    elif task.kind.is_backward:
        if v < last_stage:
            deps.append(make_task(task.kind, m, s, v + 1, cfg))
        if s < k:
            deps.append(make_task(task.kind, m, s + 1, v, cfg))
        deps.append(make_task(TaskKind.FORWARD, m, s, v, cfg))
    else:
        deps.append(make_task(TaskKind.INPUT_GRAD, m, s, v, cfg))
    return frozenset(deps)


def effective_partition(
    cfg: ScenarioConfig, segments: int, partition: SequencePartition | None = None
) -> SequencePartition:
    """Partition actually used for costing a schedule with ``segments`` units per micro-batch."""
    if segments == 1:
        return SequencePartition((cfg.seq_len,))
    if partition is None:
        return cwp_partition(cfg)
    if partition.segments != segments or partition.total != cfg.seq_len:
        raise ValueError(
            f"partition {list(partition.lengths)} does not split seq_len={cfg.seq_len} into {segments} segments"
        )
    return partition


@dataclass(frozen=True)
class SimReport:
    kind: str
    config: ScenarioConfig
    partition: SequencePartition
    device_orders: tuple[tuple[Task, ...], ...]
    task_times: dict[Task, tuple[Fraction, Fraction]]
    makespan: Fraction
    per_device_busy: tuple[Fraction, ...]
    per_device_bubble: tuple[Fraction, ...]
    memory_series: tuple[tuple[tuple[Fraction, Fraction], ...], ...]
    peak_memory: tuple[Fraction, ...]
    warmup_memory: tuple[Fraction, ...]

    @property
    def pipeline_size(self) -> int:
        return len(self.device_orders)

    @property
    def device_bubble_ratio(self) -> tuple[Fraction, ...]:
        """Idle share of each device's window ``[first start, last end]``."""
        out = []
        for d, order in enumerate(self.device_orders):
            if not order:
                out.append(Fraction(0))
                continue
            window = self.task_times[order[-1]][1] - self.task_times[order[0]][0]
            out.append(self.per_device_bubble[d] / window if window else Fraction(0))
        return tuple(out)

    @property
    def bubble_ratio(self) -> Fraction:
        """Aggregate idle share of ``pipeline_size * makespan`` device-time."""
        if self.makespan == 0:
            return Fraction(0)
        return 1 - sum(self.per_device_busy, Fraction(0)) / (self.pipeline_size * self.makespan)

    @property
    def max_peak_memory(self) -> Fraction:
        return max(self.peak_memory)

    @property
    def tokens(self) -> int:
        return self.config.micro_batches * self.config.seq_len

    @property
    def modeled_throughput(self) -> Fraction:
        return Fraction(self.tokens) / self.makespan if self.makespan else Fraction(0)

    def to_dict(self, memory_stride: int | None = None) -> dict[str, Any]:
        devices = []
        for d, order in enumerate(self.device_orders):
            series = self.memory_series[d]
            if memory_stride and memory_stride > 1:
                series = _downsample(series, memory_stride)
            devices.append(
                {
                    "device": d + 1,
                    "busy": fraction_str(self.per_device_busy[d]),
                    "bubble": fraction_str(self.per_device_bubble[d]),
                    "bubble_ratio": float(self.device_bubble_ratio[d]),
                    "peak_memory": fraction_str(self.peak_memory[d]),
                    "warmup_memory": fraction_str(self.warmup_memory[d]),
                    "tasks": [
                        {
                            "kind": t.kind.value,
                            "m": t.micro_batch,
                            "s": t.segment,
                            "stage": t.stage,
                            "start": fraction_str(self.task_times[t][0]),
                            "end": fraction_str(self.task_times[t][1]),
                        }
                        for t in order
                    ],
                    "memory_series": [[fraction_str(t), fraction_str(v)] for t, v in series],
                }
            )
        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "partition": self.partition.to_dict(),
            "makespan": fraction_str(self.makespan),
            "makespan_float": float(self.makespan),
            "bubble_ratio": float(self.bubble_ratio),
            "max_peak_memory": fraction_str(self.max_peak_memory),
            "modeled_throughput": float(self.modeled_throughput),
            "devices": devices,
        }

    def to_json(self, memory_stride: int | None = None) -> str:
        return json.dumps(self.to_dict(memory_stride), indent=1) + "\n"


def _downsample(series: Sequence[tuple[Fraction, Fraction]], stride: int) -> list[tuple[Fraction, Fraction]]:
    """Every ``stride``-th point plus the first peak and the final point, in series order."""
    if not series:
        return []
    keep = set(range(0, len(series), stride))
    keep.add(max(range(len(series)), key=lambda j: (series[j][1], -j)))
    keep.add(len(series) - 1)
    return [series[j] for j in sorted(keep)]


def _find_cycle(orders, ptr, done, cfg, segments) -> list[Task]:
    # follow "device d waits on a task owned by device d'" edges until a repeat
    blocked = {}
    for d, order in enumerate(orders):
        if ptr[d] < len(order):
            task = order[ptr[d]]
            waiting = sorted(
                (dep for dep in dependencies(task, cfg, segments) if dep not in done),
                key=lambda t: (t.device, t.stage, t.micro_batch, t.segment, t.kind.value),
            )
            blocked[d] = (task, waiting[0] if waiting else None)
    if not blocked:
        return []
    d = min(blocked)
    seen: list[int] = []
    while d not in seen and d in blocked:
        seen.append(d)
        dep = blocked[d][1]
        if dep is None:
            break
        d = dep.device - 1
    start = seen.index(d) if d in seen else 0
    return [blocked[x][0] for x in seen[start:]]


def simulate(
    schedule: Schedule,
    cfg: ScenarioConfig | None = None,
    partition: SequencePartition | None = None,
) -> SimReport:
    """Execute ``schedule`` and collect timing and activation residency.

    ``partition`` defaults to the balanced partition for sequence-level
    schedules and is ignored for micro-batch-level ones.
    """
    cfg = schedule.config if cfg is None else cfg
    segments = schedule.segments
    part = effective_partition(cfg, segments, partition)
    orders = [list(order) for order in schedule.device_orders]
    where: dict[Task, int] = {}
    for d, order in enumerate(orders):
        for task in order:
            if task in where:
                raise SimulationError(f"{task} scheduled twice")
            where[task] = d

    deps_of = {}
    for task in where:
        deps = dependencies(task, cfg, segments)
        for dep in deps:
            if dep not in where:
                raise IncompleteScheduleError(task, dep)
        deps_of[task] = deps

    times: dict[Task, tuple[Fraction, Fraction]] = {}
    free = [Fraction(0)] * len(orders)
    ptr = [0] * len(orders)
    remaining = len(where)
    progress = True
    while remaining and progress:
        progress = False
        for d, order in enumerate(orders):
            while ptr[d] < len(order):
                task = order[ptr[d]]
                deps = deps_of[task]
                if any(dep not in times for dep in deps):
                    break
                start = free[d]
                for dep in deps:
                    ready = times[dep][1]
                    if where[dep] != d:
                        ready += cfg.comm_latency
                    if ready > start:
                        start = ready
                end = start + task_cost(cfg, part, task)
                times[task] = (start, end)
                free[d] = end
                ptr[d] += 1
                remaining -= 1
                progress = True
    if remaining:
        raise DeadlockError(_find_cycle(orders, ptr, times, cfg, segments), remaining)

    split = any(t.kind is TaskKind.INPUT_GRAD for t in where)
    busy, bubble, series_all, peaks, warm = [], [], [], [], []
    for order in orders:
        if not order:
            busy.append(Fraction(0))
            bubble.append(Fraction(0))
            series_all.append(((Fraction(0), Fraction(0)),))
            peaks.append(Fraction(0))
            warm.append(Fraction(0))
            continue
        work = sum((times[t][1] - times[t][0] for t in order), Fraction(0))
        busy.append(work)
        bubble.append(times[order[-1]][1] - times[order[0]][0] - work)
        resident = Fraction(0)
        series = [(Fraction(0), Fraction(0))]
        held: dict[tuple[int, int, int], Fraction] = {}
        warm_value = None
        for task in order:
            if warm_value is None and task.kind.is_backward:
                # what the warm-up left resident
                warm_value = resident
            if task.kind is TaskKind.FORWARD:
                units = cfg.activation_cost_per_token * part.lengths[task.segment - 1]
                held[task.unit] = units
                resident += units
            elif (task.kind is TaskKind.FUSED_BACKWARD and not split) or task.kind is TaskKind.WEIGHT_GRAD:
                resident -= held.pop(task.unit, Fraction(0))
            else:
                continue
            if resident < 0:
                raise SimulationError(f"negative residency after {task}")
            series.append((times[task][1], resident))
        series_all.append(tuple(series))
        peaks.append(max(v for _, v in series))
        warm.append(max(v for _, v in series) if warm_value is None else warm_value)

    makespan = max((end for _, end in times.values()), default=Fraction(0))
    return SimReport(
        kind=str(schedule.kind),
        config=cfg,
        partition=part,
        device_orders=tuple(tuple(o) for o in orders),
        task_times=times,
        makespan=makespan,
        per_device_busy=tuple(busy),
        per_device_bubble=tuple(bubble),
        memory_series=tuple(series_all),
        peak_memory=tuple(peaks),
        warmup_memory=tuple(warm),
    )


def critical_path(schedule: Schedule, cfg: ScenarioConfig | None = None,
                  partition: SequencePartition | None = None) -> Fraction:
    """Longest dependency chain (durations plus cross-device latency), ignoring device contention."""
    cfg = schedule.config if cfg is None else cfg
    part = effective_partition(cfg, schedule.segments, partition)
    tasks = [t for order in schedule.device_orders for t in order]
    finish: dict[Task, Fraction] = {}

    def visit(task: Task) -> Fraction:
        if task in finish:
            return finish[task]
        stack = [task]
        while stack:
            top = stack[-1]
            pending = [d for d in dependencies(top, cfg, schedule.segments) if d not in finish]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            if top in finish:
                continue
            start = Fraction(0)
            for dep in dependencies(top, cfg, schedule.segments):
                ready = finish[dep] + (cfg.comm_latency if dep.device != top.device else 0)
                start = max(start, ready)
            finish[top] = start + task_cost(cfg, part, top)
        return finish[task]

    return max((visit(t) for t in tasks), default=Fraction(0))


_FAMILY_KEYS = ("pipeline_size", "micro_batches", "seq_len", "layers", "hidden_dim", "param_count")


@dataclass(frozen=True)
class Comparison:
    rows: tuple[dict[str, Any], ...]

    COLUMNS = (
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
        "makespan_ratio",
        "bubble_ratio_ratio",
        "peak_memory_ratio",
        "throughput_ratio",
    )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row[k]) for k in self.COLUMNS})
        return buf.getvalue()


def _fmt(value: Any) -> str:
    if isinstance(value, Fraction):
        return format(float(value), ".10g")
    return str(value)


def _ratio(a: Fraction, b: Fraction) -> Fraction | str:
    if b == 0:
        return Fraction(1) if a == 0 else "inf"
    return a / b


def compare(reports: Iterable[SimReport], allow_mismatch: bool = False) -> Comparison:
    """Tabulate reports; ratio columns are relative to the first report."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    base = reports[0]
    if not allow_mismatch:
        for r in reports[1:]:
            diff = [k for k in _FAMILY_KEYS if getattr(r.config, k) != getattr(base.config, k)]
            if diff:
                raise ValueError(f"reports disagree on {diff}; pass allow_mismatch to compare anyway")
    rows = []
    for r in reports:
        rows.append(
            {
                "kind": r.kind,
                "pipeline_size": r.config.pipeline_size,
                "stages_per_device": r.config.stages_per_device,
                "micro_batches": r.config.micro_batches,
                "segments": r.partition.segments,
                "seq_len": r.config.seq_len,
                "partition": " ".join(str(n) for n in r.partition.lengths),
                "makespan": r.makespan,
                "bubble_ratio": r.bubble_ratio,
                "max_peak_memory": r.max_peak_memory,
                "modeled_throughput": r.modeled_throughput,
                "makespan_ratio": _ratio(r.makespan, base.makespan),
                "bubble_ratio_ratio": _ratio(r.bubble_ratio, base.bubble_ratio),
                "peak_memory_ratio": _ratio(r.max_peak_memory, base.max_peak_memory),
                "throughput_ratio": _ratio(r.modeled_throughput, base.modeled_throughput),
            }
        )
    return Comparison(tuple(rows))
