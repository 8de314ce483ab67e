"""Independent legality checks for schedules.

Nothing here reuses the generators' ordering logic or the simulator's
dependency function: the dependency rules, device placement and warm-up
formulas are restated locally so that a bug in one place cannot hide in the
other.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable

from .core import ScenarioConfig, SequencePartition, Task, TaskKind, task_cost
from .schedules import Schedule, ScheduleKind
from .simengine import effective_partition

F, B, I, W = TaskKind.FORWARD, TaskKind.FUSED_BACKWARD, TaskKind.INPUT_GRAD, TaskKind.WEIGHT_GRAD

ORACLE_MAX_DEVICES = 3
ORACLE_MAX_MICRO_BATCHES = 3
ORACLE_MAX_SEGMENTS = 2

# (kind, micro_batch, segment, stage)
Key = tuple[TaskKind, int, int, int]


@dataclass(frozen=True)
class Violation:
    code: str
    device: int | None
    index: int | None
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "device": self.device, "index": self.index, "message": self.message}


@dataclass(frozen=True)
class Verdict:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def __bool__(self) -> bool:
        return self.ok


def _home_device(stage: int, P: int) -> int:
    # stages are dealt round-robin: stage P+1 lands back on device 1
    return (stage - 1) % P + 1


def _predecessors(key: Key, n_stages: int, k: int) -> list[Key]:
    kind, m, s, v = key
    if kind is F:
        out = []
        if v > 1:
            out.append((F, m, s, v - 1))
        if s > 1:
            out.append((F, m, s - 1, v))
        return out
    if kind is W:
        return [(I, m, s, v)]
    out = [(F, m, s, v)]
    if s < k:
        out.append((kind, m, s + 1, v))
    if v < n_stages:
        out.append((kind, m, s, v + 1))
    return out


def _expected_keys(cfg: ScenarioConfig, k: int, split: bool) -> list[Key]:
    kinds = (F, I, W) if split else (F, B)
    n_stages = cfg.pipeline_size * cfg.stages_per_device
    return [
        (kind, m, s, v)
        for kind in kinds
        for m in range(1, cfg.micro_batches + 1)
        for s in range(1, k + 1)
        for v in range(1, n_stages + 1)
    ]


def _key(task: Task) -> Key:
    return (task.kind, task.micro_batch, task.segment, task.stage)


def _fmt(key: Key) -> str:
    kind, m, s, v = key
    return f"{kind.code}({m},{s},s{v})"


def _units(schedule: Schedule, cfg: ScenarioConfig) -> int:
    return cfg.segments if schedule.kind.is_sequence else 1


def check_schedule(schedule: Schedule, cfg: ScenarioConfig | None = None) -> Verdict:
    """Legality of ``schedule`` under ``cfg``; problems come back as violations, never raised."""
    cfg = cfg or schedule.config
    P = cfg.pipeline_size
    k = _units(schedule, cfg)
    n_stages = P * cfg.stages_per_device
    split = schedule.kind.is_zero_bubble
    out: list[Violation] = []

    if len(schedule.device_orders) != P:
        out.append(Violation("devices", None, None, f"{len(schedule.device_orders)} device lists for {P} devices"))

    expected = set(_expected_keys(cfg, k, split))
    seen: Counter[Key] = Counter()
    where: dict[Key, tuple[int, int]] = {}
    for d, order in enumerate(schedule.device_orders, start=1):
        for idx, task in enumerate(order):
            key = _key(task)
            seen[key] += 1
            where.setdefault(key, (d, idx))
            if key not in expected:
                if split and task.kind is B or not split and task.kind in (I, W):
                    out.append(Violation("backward-style", d, idx, f"{_fmt(key)} does not match {schedule.kind}"))
                else:
                    out.append(Violation("unexpected", d, idx, f"{_fmt(key)} is outside the task set"))
                continue
            if _home_device(task.stage, P) != d or task.device != d:
                out.append(Violation("placement", d, idx, f"{_fmt(key)} belongs on device {_home_device(task.stage, P)}"))
    for key, count in sorted(seen.items(), key=lambda kv: _sort_key(kv[0])):
        if count > 1:
            d, idx = where[key]
            out.append(Violation("duplicate", d, idx, f"{_fmt(key)} appears {count} times"))
    for key in sorted(expected - set(seen), key=_sort_key):
        out.append(Violation("missing", _home_device(key[3], P), None, f"{_fmt(key)} never runs"))

    out.extend(_check_order(schedule, n_stages, k, set(seen)))
    if schedule.kind.is_sequence:
        out.extend(_check_segment_order(schedule))
    out.extend(_check_accumulation(schedule, cfg, k, split))
    return Verdict(tuple(out))


def _sort_key(key: Key) -> tuple:
    kind, m, s, v = key
    return (kind.value, m, s, v)


def _check_order(schedule: Schedule, n_stages: int, k: int, present: set[Key]) -> list[Violation]:
    """Zero-cost replay: every device advances while its next task has all present predecessors done."""
    out = []
    orders = [[_key(t) for t in order] for order in schedule.device_orders]
    position = {}
    for d, order in enumerate(orders, start=1):
        for idx, key in enumerate(order):
            position.setdefault(key, (d, idx))
    # a predecessor queued later on the same device can never be waited for
    for d, order in enumerate(orders, start=1):
        for idx, key in enumerate(order):
            for pred in _predecessors(key, n_stages, k):
                pd, pidx = position.get(pred, (None, None))
                if pd == d and pidx > idx:
                    out.append(Violation("order", d, idx, f"{_fmt(key)} runs before its predecessor {_fmt(pred)}"))

    done: set[Key] = set()
    ptr = [0] * len(orders)
    progress = True
    while progress:
        progress = False
        for d, order in enumerate(orders):
            while ptr[d] < len(order):
                key = order[ptr[d]]
                preds = [p for p in _predecessors(key, n_stages, k) if p in present]
                if any(p not in done for p in preds):
                    break
                done.add(key)
                ptr[d] += 1
                progress = True
    stuck = [(d + 1, ptr[d], orders[d][ptr[d]]) for d in range(len(orders)) if ptr[d] < len(orders[d])]
    for d, idx, key in stuck:
        waiting = [_fmt(p) for p in _predecessors(key, n_stages, k) if p in present and p not in done]
        out.append(Violation("deadlock", d, idx, f"{_fmt(key)} blocked on {', '.join(waiting)}"))
    return out


def _check_segment_order(schedule: Schedule) -> list[Violation]:
    out = []
    for d, order in enumerate(schedule.device_orders, start=1):
        last: dict[tuple[TaskKind, int, int], int] = {}
        for idx, task in enumerate(order):
            group = (task.kind, task.micro_batch, task.stage)
            prev = last.get(group)
            if prev is not None:
                ascending = task.kind is F
                if ascending and task.segment < prev or not ascending and task.segment > prev:
                    direction = "ascending" if ascending else "descending"
                    out.append(
                        Violation(
                            "segment-order",
                            d,
                            idx,
                            f"{task} breaks {direction} segment order after segment {prev}",
                        )
                    )
            last[group] = task.segment
    return out


def _check_accumulation(schedule: Schedule, cfg: ScenarioConfig, k: int, split: bool) -> list[Violation]:
    # the weight update waits for every micro-batch's gradient on every stage
    grad_kind = W if split else B
    per_stage = Counter(t.stage for t in schedule.tasks() if t.kind is grad_kind)
    want = cfg.micro_batches * k
    out = []
    for v in range(1, cfg.pipeline_size * cfg.stages_per_device + 1):
        if per_stage[v] != want:
            out.append(
                Violation(
                    "accumulation",
                    _home_device(v, cfg.pipeline_size),
                    None,
                    f"stage {v} accumulates {per_stage[v]} gradient units, expected {want}",
                )
            )
    return out


def expected_warmup(kind: ScheduleKind | str, cfg: ScenarioConfig, device: int) -> int:
    """Forwards ``device`` should run before its first backward under the closed-form warm-up rules."""
    kind = ScheduleKind.parse(kind)
    P, M, k, n_v = cfg.pipeline_size, cfg.micro_batches, cfg.segments, cfg.stages_per_device
    lag = P - device
    if kind is ScheduleKind.GPIPE:
        return M
    if kind in (ScheduleKind.ONE_F_ONE_B, ScheduleKind.ZB1P):
        return lag if M > P else M
    if kind in (ScheduleKind.SEQ1F1B, ScheduleKind.SEQ_ZB1P):
        return lag - 1 + k if M > P else M * k
    if kind is ScheduleKind.ONE_F_ONE_B_I:
        return min(2 * lag + (n_v - 1) * P, M * n_v)
    return min(2 * lag + (n_v - 1) * P + k - 1, M * k * n_v)


def observed_warmup(schedule: Schedule) -> list[int]:
    """Forwards each device runs before its first backward (input gradient for split kinds)."""
    counts = []
    for order in schedule.device_orders:
        n = 0
        for task in order:
            if task.kind in (B, I):
                break
            n += task.kind is F
        counts.append(n)
    return counts


def check_warmup_formulas(schedule: Schedule, cfg: ScenarioConfig | None = None) -> Verdict:
    """Compare observed warm-ups with :func:`expected_warmup`.

    The first steady-phase forward also runs before the first backward, so a
    device with warm-up ``w`` shows ``w + 1`` forwards there, or all of its
    forwards when ``w`` covers them.
    """
    cfg = cfg or schedule.config
    out = []
    for d, got in enumerate(observed_warmup(schedule), start=1):
        w = expected_warmup(schedule.kind, cfg, d)
        total = sum(1 for t in schedule.device_orders[d - 1] if t.kind is F)
        want = min(w + 1, total)
        if got != want:
            out.append(
                Violation(
                    "warmup",
                    d,
                    got,
                    f"device {d} runs {got} forwards before its first backward; warm-up {w} implies {want}",
                )
            )
    return Verdict(tuple(out))


def oracle_min_makespan(
    cfg: ScenarioConfig,
    kind_constraints: ScheduleKind | str = ScheduleKind.SEQ1F1B,
    partition: SequencePartition | None = None,
) -> Fraction:
    """Minimum makespan over every legal per-device ordering, by branch and bound.

    Only fused backwards are considered. ``kind_constraints`` picks the unit
    granularity: sequence kinds split each micro-batch into ``cfg.segments``
    units, the others keep it whole. Branching follows the active-schedule
    construction (an optimal schedule is always active), with a
    device-load and tail-length lower bound and memoised states.
    """
    kind = ScheduleKind.parse(kind_constraints)
    k = cfg.segments if kind.is_sequence else 1
    P, M = cfg.pipeline_size, cfg.micro_batches
    if P > ORACLE_MAX_DEVICES or M > ORACLE_MAX_MICRO_BATCHES or k > ORACLE_MAX_SEGMENTS or cfg.stages_per_device != 1:
        raise ValueError(
            f"oracle limited to P <= {ORACLE_MAX_DEVICES}, M <= {ORACLE_MAX_MICRO_BATCHES}, "
            f"k <= {ORACLE_MAX_SEGMENTS}, one stage per device"
        )
    part = effective_partition(cfg, k, partition)
    keys = _expected_keys(cfg, k, split=False)
    exact = {key: task_cost(cfg, part, Task(key[0], key[1], key[2], key[3], key[3])) for key in keys}
    # search on integers: one common denominator keeps every time exact
    scale = math.lcm(cfg.comm_latency.denominator, *(c.denominator for c in exact.values()))
    cost = {key: int(c * scale) for key, c in exact.items()}
    preds = {key: _predecessors(key, P, k) for key in keys}
    # micro-batches are interchangeable, so fixing the order in which they
    # enter the pipeline loses no optimum and prunes M! relabellings
    for m in range(2, M + 1):
        preds[(F, m, 1, 1)] = preds[(F, m, 1, 1)] + [(F, m - 1, 1, 1)]
    succs: dict[Key, list[Key]] = defaultdict(list)
    for key, ps in preds.items():
        for p in ps:
            succs[p].append(key)
    comm = int(cfg.comm_latency * scale)

    def link(a: Key, b: Key) -> int:
        return comm if a[3] != b[3] else 0

    topo = _topological(keys, preds)
    tail: dict[Key, int] = {}
    for key in reversed(topo):
        tail[key] = cost[key] + max((link(key, s) + tail[s] for s in succs[key]), default=0)

    best = [sum(cost.values()) + len(keys) * comm + 1]
    # per set of finished tasks: time vectors already explored
    seen: dict[frozenset, list[tuple[int, ...]]] = defaultdict(list)

    def lower_bound(finish: dict[Key, int], ready: list[int]) -> int:
        release: dict[Key, int] = {}
        bound = max(ready)
        jobs: list[list[tuple[int, int, int]]] = [[] for _ in range(P)]
        for key in topo:
            if key in finish:
                continue
            dev = key[3] - 1
            r = ready[dev]
            for p in preds[key]:
                done_at = finish[p] if p in finish else release[p] + cost[p]
                r = max(r, done_at + link(p, key))
            release[key] = r
            bound = max(bound, r + tail[key])
            jobs[dev].append((r, cost[key], tail[key] - cost[key]))
        for dev in range(P):
            if jobs[dev]:
                bound = max(bound, _preemptive_bound(jobs[dev]))
        return bound

    def dominated(finish: dict[Key, int], ready: list[int]) -> bool:
        # only finish times a pending task still waits on shape the future; a
        # state no earlier than an explored one in every such time cannot beat it
        done = frozenset(finish)
        frontier = sorted((_sort_key(key), t) for key, t in finish.items() if any(s not in finish for s in succs[key]))
        vector = tuple(ready) + tuple(t for _, t in frontier)
        explored = seen[done]
        if any(all(a <= b for a, b in zip(old, vector)) for old in explored):
            return True
        explored[:] = [old for old in explored if not all(b <= a for a, b in zip(old, vector))]
        explored.append(vector)
        return False

    def search(finish: dict[Key, int], ready: list[int]) -> None:
        if len(finish) == len(keys):
            best[0] = min(best[0], max(ready))
            return
        if dominated(finish, ready):
            return
        if lower_bound(finish, ready) >= best[0]:
            return
        avail = [key for key in keys if key not in finish and all(p in finish for p in preds[key])]
        est = {}
        for key in avail:
            t = ready[key[3] - 1]
            for p in preds[key]:
                t = max(t, finish[p] + link(p, key))
            est[key] = t
        pivot = min(avail, key=lambda key: (est[key] + cost[key], _sort_key(key)))
        horizon = est[pivot] + cost[pivot]
        dev = pivot[3]
        conflict = [key for key in avail if key[3] == dev and est[key] < horizon or key == pivot]
        conflict.sort(key=lambda key: (est[key], _sort_key(key)))
        for key in conflict:
            end = est[key] + cost[key]
            finish[key] = end
            saved = ready[dev - 1]
            ready[dev - 1] = end
            search(finish, ready)
            ready[dev - 1] = saved
            del finish[key]

    search({}, [0] * P)
    return Fraction(best[0], scale)


def _preemptive_bound(jobs: list[tuple[int, int, int]]) -> int:
    """Optimal preemptive one-device makespan with release and tail times.

    Runs the pending job with the longest tail whenever a job is released;
    a valid lower bound for the non-preemptive device.
    """
    jobs = sorted(jobs)
    remaining: list[list[int]] = []
    t = jobs[0][0]
    bound = 0
    j = 0
    while j < len(jobs) or remaining:
        while j < len(jobs) and jobs[j][0] <= t:
            r, p, q = jobs[j]
            remaining.append([q, p])
            j += 1
        if not remaining:
            t = jobs[j][0]
            continue
        remaining.sort(key=lambda e: e[0])
        q, p = remaining[-1]
        horizon = jobs[j][0] if j < len(jobs) else t + p
        run = min(p, horizon - t)
        t += run
        if run == p:
            remaining.pop()
            bound = max(bound, t + q)
        else:
            remaining[-1][1] = p - run
    return bound


def _topological(keys: Iterable[Key], preds: dict[Key, list[Key]]) -> list[Key]:
    keys = list(keys)
    indeg = {key: len(preds[key]) for key in keys}
    succ: dict[Key, list[Key]] = defaultdict(list)
    for key in keys:
        for p in preds[key]:
            succ[p].append(key)
    ready = [key for key in keys if indeg[key] == 0]
    out = []
    while ready:
        key = ready.pop()
        out.append(key)
        for s in succ[key]:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
    return out
