"""Per-device task orders for GPipe, 1F1B, interleaved 1F1B, their
sequence-level counterparts, and the zero-bubble (B/W split) variants.

Every 1F1B-family order is built the same way: a warm-up of ``w`` forwards,
a steady phase that pairs each further forward with one backward popped
from the activation queue, and a cool-down that drains the queue. The
queue decides which backward comes next: FIFO over micro-batches for
micro-batch-level schedules, and for sequence-level ones FIFO over
micro-batches but LIFO over the segments of a micro-batch.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Iterator

from .core import ScenarioConfig, SequencePartition, Task, TaskKind, make_task, task_cost
from .simengine import DeadlockError, effective_partition, simulate

SCHEDULE_FORMAT = "seqpipe.schedule/1"


class ScheduleKind(enum.Enum):
    GPIPE = "GPipe"
    ONE_F_ONE_B = "1F1B"
    ONE_F_ONE_B_I = "1F1B-I"
    SEQ1F1B = "Seq1F1B"
    SEQ1F1B_I = "Seq1F1B-I"
    ZB1P = "ZB1P"
    SEQ_ZB1P = "SeqZB1P"

    def __str__(self) -> str:
        return self.value

    @property
    def is_sequence(self) -> bool:
        return self in (ScheduleKind.SEQ1F1B, ScheduleKind.SEQ1F1B_I, ScheduleKind.SEQ_ZB1P)

    @property
    def is_interleaved(self) -> bool:
        return self in (ScheduleKind.ONE_F_ONE_B_I, ScheduleKind.SEQ1F1B_I)

    @property
    def is_zero_bubble(self) -> bool:
        return self in (ScheduleKind.ZB1P, ScheduleKind.SEQ_ZB1P)

    @classmethod
    def parse(cls, name: str | ScheduleKind) -> ScheduleKind:
        if isinstance(name, ScheduleKind):
            return name
        key = _norm(name)
        for kind in cls:
            if _norm(kind.value) == key or _norm(kind.name) == key:
                return kind
        aliases = {"onefoneb": cls.ONE_F_ONE_B, "onefonebi": cls.ONE_F_ONE_B_I, "seqzb": cls.SEQ_ZB1P}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown schedule kind {name!r}; choose from {[k.value for k in cls]}")


def _norm(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch.isalnum())


class FifoQueue:
    """Activation queue of micro-batch-level 1F1B: first in, first out."""

    def __init__(self) -> None:
        self._items: deque[tuple[int, int]] = deque()

    def push(self, micro_batch: int, segment: int) -> None:
        self._items.append((micro_batch, segment))

    def pop(self) -> tuple[int, int]:
        if not self._items:
            raise IndexError("pop from empty queue")
        return self._items.popleft()

    def __len__(self) -> int:
        return len(self._items)


class PartiallyOrderedQueue:
    """Queue that pops the tail segment of the earliest micro-batch.

    FIFO across micro-batches, LIFO across the segments of one micro-batch,
    which is exactly the order causal backward passes must follow.
    """

    def __init__(self) -> None:
        self._entries: dict[int, list[int]] = {}

    def push(self, micro_batch: int, segment: int) -> None:
        segs = self._entries.setdefault(micro_batch, [])
        if segment in segs:
            raise ValueError(f"({micro_batch}, {segment}) already queued")
        segs.append(segment)

    def pop(self) -> tuple[int, int]:
        if not self._entries:
            raise IndexError("pop from empty queue")
        mb = min(self._entries)
        segs = self._entries[mb]
        seg = max(segs)
        segs.remove(seg)
        if not segs:
            del self._entries[mb]
        return mb, seg

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def __contains__(self, item: tuple[int, int]) -> bool:
        mb, seg = item
        return seg in self._entries.get(mb, ())


# queue operations under the names used elsewhere in the package
def poq_push(q: PartiallyOrderedQueue, micro_batch: int, segment: int) -> None:
    q.push(micro_batch, segment)


def poq_pop(q: PartiallyOrderedQueue) -> tuple[int, int]:
    return q.pop()


def warmup_1f1b(P: int, M: int, i: int) -> int:
    _check_device(P, i)
    return P - i if M > P else M


def warmup_seq1f1b(P: int, M: int, k: int, i: int) -> int:
    _check_device(P, i)
    return P - i - 1 + k if M > P else M


def warmup_1f1b_i(P: int, n_v: int, i: int) -> int:
    _check_device(P, i)
    return (P - i) * 2 + (n_v - 1) * P


def warmup_seq1f1b_i(P: int, n_v: int, k: int, i: int) -> int:
    _check_device(P, i)
    return (P - i) * 2 + (n_v - 1) * P + k - 1


def _check_device(P: int, i: int) -> None:
    if not 1 <= i <= P:
        raise ValueError(f"device {i} outside [1, {P}]")


def rotation_group(P: int, k: int) -> int:
    """Consecutive sub-sequence units an interleaved device runs per stage before switching.

    ``P`` whenever that is a whole number of micro-batches' segments,
    otherwise rounded up to the next multiple of ``k`` so no micro-batch is
    split across a stage switch.
    """
    return k * -(-P // k) if P % k else P


@dataclass(frozen=True)
class Schedule:
    config: ScenarioConfig
    kind: ScheduleKind
    device_orders: tuple[tuple[Task, ...], ...]

    @property
    def segments(self) -> int:
        """Schedulable units per micro-batch (1 for micro-batch-level kinds)."""
        return self.config.segments if self.kind.is_sequence else 1

    def tasks(self) -> Iterator[Task]:
        for order in self.device_orders:
            yield from order

    def __len__(self) -> int:
        return sum(len(o) for o in self.device_orders)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": SCHEDULE_FORMAT,
            "kind": self.kind.value,
            "config": self.config.to_dict(),
            "devices": [
                [{"kind": t.kind.value, "m": t.micro_batch, "s": t.segment, "stage": t.stage} for t in order]
                for order in self.device_orders
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Schedule:
        if data.get("format", SCHEDULE_FORMAT) != SCHEDULE_FORMAT:
            raise ValueError(f"unsupported schedule format {data.get('format')!r}")
        cfg = ScenarioConfig.from_dict(data["config"])
        orders = []
        for d, raw in enumerate(data["devices"], start=1):
            orders.append(
                tuple(Task(TaskKind(t["kind"]), int(t["m"]), int(t["s"]), int(t["stage"]), d) for t in raw)
            )
        return cls(cfg, ScheduleKind.parse(data["kind"]), tuple(orders))

    @classmethod
    def from_json(cls, text: str) -> Schedule:
        return cls.from_dict(json.loads(text))


def _check_supported(cfg: ScenarioConfig, kind: ScheduleKind) -> None:
    if kind.is_interleaved and cfg.stages_per_device < 2:
        raise ValueError(f"{kind} needs stages_per_device >= 2, got {cfg.stages_per_device}")
    if not kind.is_interleaved and cfg.stages_per_device != 1:
        raise ValueError(f"{kind} places one stage per device; got stages_per_device={cfg.stages_per_device}")


def _warmup(cfg: ScenarioConfig, kind: ScheduleKind, device: int, group: int) -> int:
    P, M, k, n_v = cfg.pipeline_size, cfg.micro_batches, cfg.segments, cfg.stages_per_device
    if kind is ScheduleKind.GPIPE:
        return M
    if kind in (ScheduleKind.ONE_F_ONE_B, ScheduleKind.ZB1P):
        return warmup_1f1b(P, M, device)
    if kind in (ScheduleKind.SEQ1F1B, ScheduleKind.SEQ_ZB1P):
        # M <= P: every sub-sequence is forwarded before any backward
        return warmup_seq1f1b(P, M, k, device) if M > P else M * k
    if kind is ScheduleKind.ONE_F_ONE_B_I:
        return warmup_1f1b_i(P, n_v, device)
    if group == P:
        return warmup_seq1f1b_i(P, n_v, k, device)
    return (P - device) * 2 + (n_v - 1) * group + k - 1


def _device_order(cfg: ScenarioConfig, kind: ScheduleKind, device: int) -> list[Task]:
    k = cfg.segments if kind.is_sequence else 1
    chunks = cfg.stages_per_device if kind.is_interleaved else 1
    units = [(m, s) for m in range(1, cfg.micro_batches + 1) for s in range(1, k + 1)]
    group = rotation_group(cfg.pipeline_size, k) if kind.is_interleaved else len(units)

    forwards: list[tuple[int, int, int]] = []
    backward_chunks: list[int] = []
    for lo in range(0, len(units), group):
        block = units[lo : lo + group]
        for c in range(chunks):
            forwards.extend((m, s, c) for m, s in block)
        for c in reversed(range(chunks)):
            backward_chunks.extend([c] * len(block))

    queue_cls = PartiallyOrderedQueue if kind.is_sequence else FifoQueue
    queues = [queue_cls() for _ in range(chunks)]
    bwd_kind = TaskKind.INPUT_GRAD if kind.is_zero_bubble else TaskKind.FUSED_BACKWARD
    order: list[Task] = []

    def forward(j: int) -> None:
        m, s, c = forwards[j]
        order.append(make_task(TaskKind.FORWARD, m, s, device + c * cfg.pipeline_size, cfg))
        queues[c].push(m, s)

    def backward(j: int) -> None:
        c = backward_chunks[j]
        m, s = queues[c].pop()
        order.append(make_task(bwd_kind, m, s, device + c * cfg.pipeline_size, cfg))

    total = len(forwards)
    warm = min(_warmup(cfg, kind, device, group), total)
    for j in range(warm):
        forward(j)
    for j in range(total - warm):
        forward(warm + j)
        backward(j)
    for j in range(total - warm, total):
        backward(j)
    return order


def _partial_rotation(cfg: ScenarioConfig, kind: ScheduleKind) -> bool:
    k = cfg.segments if kind.is_sequence else 1
    group = rotation_group(cfg.pipeline_size, k)
    total = cfg.micro_batches * k
    return total > group and total % group != 0


def _require_feasible(schedule: Schedule) -> None:
    # a short final rotation group can leave the warm-up waiting on itself
    probe = schedule.config.with_(stage_forward_time=1, comm_latency=0)
    try:
        simulate(Schedule(probe, schedule.kind, schedule.device_orders), probe)
    except DeadlockError as exc:
        raise ValueError(
            f"{schedule.kind} cannot rotate a short final group of "
            f"{schedule.config.micro_batches} micro-batches on {schedule.config.pipeline_size} devices: {exc}"
        ) from exc


def _place_weight_grads(
    schedule: Schedule, cfg: ScenarioConfig, partition: SequencePartition | None
) -> tuple[tuple[Task, ...], ...]:
    """Slot each deferred weight-gradient task into an idle gap it fits in.

    F/I timings are computed without any W; a W is only put into a gap that
    can hold it entirely, so inserting it never moves an F or I. Whatever does
    not fit runs after the device's last F/I.
    """
    part = effective_partition(cfg, schedule.segments, partition)
    report = simulate(schedule, cfg, part)
    out = []
    for order in schedule.device_orders:
        pending: deque[Task] = deque()
        placed: list[Task] = []
        for idx, task in enumerate(order):
            placed.append(task)
            if task.kind is TaskKind.INPUT_GRAD:
                pending.append(make_task(TaskKind.WEIGHT_GRAD, task.micro_batch, task.segment, task.stage, cfg))
            if idx + 1 == len(order):
                break
            gap = report.task_times[order[idx + 1]][0] - report.task_times[task][1]
            while pending:
                cost = task_cost(cfg, part, pending[0])
                if cost > gap:
                    break
                gap -= cost
                placed.append(pending.popleft())
        placed.extend(pending)
        out.append(tuple(placed))
    return tuple(out)


def generate(
    cfg: ScenarioConfig,
    kind: ScheduleKind | str,
    partition: SequencePartition | None = None,
) -> Schedule:
    """Build the per-device task orders of ``kind`` for ``cfg``.

    ``partition`` only matters for the zero-bubble kinds, whose weight-gradient
    placement depends on task durations; it defaults to the balanced partition.
    """
    kind = ScheduleKind.parse(kind)
    _check_supported(cfg, kind)
    orders = tuple(tuple(_device_order(cfg, kind, d)) for d in range(1, cfg.pipeline_size + 1))
    schedule = Schedule(cfg, kind, orders)
    if kind.is_interleaved and _partial_rotation(cfg, kind):
        _require_feasible(schedule)
    if kind.is_zero_bubble:
        schedule = Schedule(cfg, kind, _place_weight_grads(schedule, cfg, partition))
    return schedule


def warmup_counts(schedule: Schedule) -> list[int]:
    """Forwards each device runs before its first backward."""
    counts = []
    for order in schedule.device_orders:
        n = 0
        for task in order:
            if task.kind is not TaskKind.FORWARD:
                break
            n += 1
        counts.append(n)
    return counts


def ascii_orders(schedule: Schedule) -> str:
    """One line per device listing its tasks, e.g. ``F1.1 F1.2 B1.2``."""
    lines = []
    for d, order in enumerate(schedule.device_orders, start=1):
        cells = [f"{t.kind.code}{t.label}" + (f"@{t.stage}" if schedule.kind.is_interleaved else "") for t in order]
        lines.append(f"dev{d}: " + " ".join(cells))
    return "\n".join(lines) + "\n"


def uniform_config(P: int, M: int, k: int = 1, n_v: int = 1, forward: Fraction | int = 1, **kw: Any) -> ScenarioConfig:
    """Config with the FLOPs model switched off: every stage forward of a micro-batch costs ``forward``."""
    values = dict(
        pipeline_size=P,
        micro_batches=M,
        segments=k,
        stages_per_device=n_v,
        seq_len=kw.pop("seq_len", 240),
        layers=1,
        hidden_dim=1,
        stage_forward_time=forward,
    )
    values.update(kw)
    return ScenarioConfig(**values)
