"""Dependency-inverting single swaps, built on the simulator's dependency rules."""

from __future__ import annotations

import random

from seqpipe.schedules import Schedule
from seqpipe.simengine import dependencies


def ancestors(schedule: Schedule) -> dict:
    cfg, k = schedule.config, schedule.segments
    memo: dict = {}

    def visit(task):
        if task in memo:
            return memo[task]
        out = set()
        for dep in dependencies(task, cfg, k):
            out.add(dep)
            out |= visit(dep)
        memo[task] = frozenset(out)
        return memo[task]

    for task in schedule.tasks():
        visit(task)
    return memo


def inverting_swaps(schedule: Schedule) -> list[tuple[int, int, int]]:
    """Every (device, i, j) with i < j where the task at j depends on the one at i."""
    anc = ancestors(schedule)
    out = []
    for d, order in enumerate(schedule.device_orders):
        for j, later in enumerate(order):
            for i in range(j):
                if order[i] in anc[later]:
                    out.append((d, i, j))
    return out


def apply_swap(schedule: Schedule, d: int, i: int, j: int) -> Schedule:
    orders = [list(o) for o in schedule.device_orders]
    orders[d][i], orders[d][j] = orders[d][j], orders[d][i]
    return Schedule(schedule.config, schedule.kind, tuple(tuple(o) for o in orders))


def sample_mutations(schedule: Schedule, n: int, seed: int = 0) -> list[Schedule]:
    swaps = inverting_swaps(schedule)
    rng = random.Random(seed)
    picks = rng.sample(swaps, n) if len(swaps) >= n else [rng.choice(swaps) for _ in range(n)]
    return [apply_swap(schedule, *s) for s in picks]
