"""Sequence-level pipeline schedules: generation, simulation and validation."""

from .core import (
    ScenarioConfig,
    SequencePartition,
    Task,
    TaskKind,
    forward_cost,
    load_config,
    preset,
    task_cost,
)
from .partition import cwp_partition, even_partition, oracle_partition
from .schedules import PartiallyOrderedQueue, Schedule, ScheduleKind, generate, uniform_config
from .simengine import DeadlockError, SimReport, compare, simulate
from .validate import Verdict, Violation, check_schedule, check_warmup_formulas, oracle_min_makespan

__all__ = [
    "DeadlockError",
    "PartiallyOrderedQueue",
    "ScenarioConfig",
    "Schedule",
    "ScheduleKind",
    "SequencePartition",
    "SimReport",
    "Task",
    "TaskKind",
    "Verdict",
    "Violation",
    "check_schedule",
    "check_warmup_formulas",
    "compare",
    "cwp_partition",
    "even_partition",
    "forward_cost",
    "generate",
    "load_config",
    "oracle_min_makespan",
    "oracle_partition",
    "preset",
    "simulate",
    "task_cost",
    "uniform_config",
]
