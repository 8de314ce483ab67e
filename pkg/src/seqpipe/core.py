"""Domain types, stage topology and the FLOPs-derived task cost model.

All times and memory quantities are exact :class:`fractions.Fraction` values so
that closed-form pipeline identities can be checked with ``==``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

try:  # python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


def as_fraction(value: Any) -> Fraction:
    """Coerce ints, decimal strings, ``"a/b"`` strings and floats to a Fraction.

    Floats go through ``str`` so ``0.1`` becomes ``1/10`` rather than its
    binary expansion.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not rationals")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(str(value))
    if isinstance(value, str):
        return Fraction(value.strip())
    raise TypeError(f"cannot interpret {value!r} as a rational")


def fraction_str(value: Fraction) -> str:
    return str(value.numerator) if value.denominator == 1 else f"{value.numerator}/{value.denominator}"


@dataclass(frozen=True, kw_only=True)
class ScenarioConfig:
    """Pipeline, model and cost parameters for one experiment.

    ``stage_forward_time`` switches the cost model off: when set, a forward of
    segment ``i`` on any stage costs ``stage_forward_time * n_i / seq_len``,
    i.e. cost is linear in tokens and a full micro-batch costs exactly
    ``stage_forward_time`` per stage.
    """

    pipeline_size: int
    micro_batches: int
    seq_len: int
    layers: int
    hidden_dim: int
    stages_per_device: int = 1
    segments: int = 1
    param_count: int = 0
    backward_ratio: Fraction = Fraction(2)
    bw_split_ratio: tuple[Fraction, Fraction] = (Fraction(1), Fraction(1))
    comm_latency: Fraction = Fraction(0)
    activation_cost_per_token: Fraction = Fraction(1)
    time_per_flop: Fraction = Fraction(1)
    stage_forward_time: Fraction | None = None

    def __post_init__(self) -> None:
        for name, low in (
            ("pipeline_size", 1),
            ("micro_batches", 1),
            ("seq_len", 1),
            ("stages_per_device", 1),
            ("segments", 1),
            ("layers", 0),
            ("hidden_dim", 0),
            ("param_count", 0),
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError(f"{name} must be an integer, got {value!r}")
            if value < low:
                raise ValueError(f"{name} must be >= {low}, got {value}")
        if self.seq_len < self.segments:
            raise ValueError(
                f"seq_len ({self.seq_len}) must be >= segments ({self.segments}) so no segment is empty"
            )
        # frozen dataclass: coerce through object.__setattr__
        coerce = lambda name, v: object.__setattr__(self, name, v)  # noqa: E731
        coerce("backward_ratio", as_fraction(self.backward_ratio))
        split = tuple(as_fraction(v) for v in self.bw_split_ratio)
        if len(split) != 2:
            raise ValueError("bw_split_ratio must be a pair")
        coerce("bw_split_ratio", split)
        coerce("comm_latency", as_fraction(self.comm_latency))
        coerce("activation_cost_per_token", as_fraction(self.activation_cost_per_token))
        coerce("time_per_flop", as_fraction(self.time_per_flop))
        if self.stage_forward_time is not None:
            coerce("stage_forward_time", as_fraction(self.stage_forward_time))
            if self.stage_forward_time <= 0:
                raise ValueError("stage_forward_time must be positive")
        if self.backward_ratio <= 0 or min(split) <= 0:
            raise ValueError("backward ratios must be positive")
        if self.comm_latency < 0:
            raise ValueError("comm_latency must be non-negative")
        if self.activation_cost_per_token <= 0 or self.time_per_flop <= 0:
            raise ValueError("activation_cost_per_token and time_per_flop must be positive")

    @property
    def total_stages(self) -> int:
        return self.pipeline_size * self.stages_per_device

    @property
    def stage_map(self) -> StageMap:
        return StageMap(self.pipeline_size, self.stages_per_device)

    def with_(self, **changes: Any) -> ScenarioConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        """Flat, JSON/TOML friendly mapping; rationals become strings."""
        out: dict[str, Any] = {}
        for key, value in asdict(self).items():
            if isinstance(value, Fraction):
                value = fraction_str(value)
            elif isinstance(value, tuple):
                value = [fraction_str(v) for v in value]
            out[key] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ScenarioConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))


@dataclass(frozen=True)
class StageMap:
    """Round-robin stage placement: device ``i`` owns stages ``i, i+P, ...``."""

    pipeline_size: int
    stages_per_device: int

    @property
    def total_stages(self) -> int:
        return self.pipeline_size * self.stages_per_device

    def device_of(self, stage: int) -> int:
        if not 1 <= stage <= self.total_stages:
            raise ValueError(f"stage {stage} outside [1, {self.total_stages}]")
        return (stage - 1) % self.pipeline_size + 1

    def chunk_of(self, stage: int) -> int:
        """0-based index of ``stage`` among its device's stages."""
        return (stage - 1) // self.pipeline_size

    def stage_of(self, device: int, chunk: int) -> int:
        return device + chunk * self.pipeline_size

    def stages_of(self, device: int) -> list[int]:
        if not 1 <= device <= self.pipeline_size:
            raise ValueError(f"device {device} outside [1, {self.pipeline_size}]")
        return [device + c * self.pipeline_size for c in range(self.stages_per_device)]


class TaskKind(enum.Enum):
    FORWARD = "forward"
    FUSED_BACKWARD = "backward"
    INPUT_GRAD = "input_grad"
    WEIGHT_GRAD = "weight_grad"

    @property
    def code(self) -> str:
        return _KIND_CODES[self]

    @property
    def is_backward(self) -> bool:
        """True for the kinds that carry the gradient to the previous stage."""
        return self in (TaskKind.FUSED_BACKWARD, TaskKind.INPUT_GRAD)


_KIND_CODES = {
    TaskKind.FORWARD: "F",
    TaskKind.FUSED_BACKWARD: "B",
    TaskKind.INPUT_GRAD: "I",
    TaskKind.WEIGHT_GRAD: "W",
}


@dataclass(frozen=True)
class Task:
    kind: TaskKind
    micro_batch: int
    segment: int
    stage: int
    device: int

    @property
    def unit(self) -> tuple[int, int, int]:
        return (self.micro_batch, self.segment, self.stage)

    @property
    def label(self) -> str:
        return f"{self.micro_batch}.{self.segment}"

    def __str__(self) -> str:
        return f"{self.kind.code}({self.micro_batch},{self.segment},s{self.stage})"


def make_task(kind: TaskKind, micro_batch: int, segment: int, stage: int, cfg: ScenarioConfig) -> Task:
    return Task(kind, micro_batch, segment, stage, cfg.stage_map.device_of(stage))


@dataclass(frozen=True)
class SequencePartition:
    """Token counts of consecutive segments of one micro-batch's sequence.

    ``imbalance`` is ``(max cost - min cost) / mean cost`` under the cost model
    it was evaluated against, or ``None`` when no cost model was supplied.
    """

    lengths: tuple[int, ...]
    imbalance: Fraction | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "lengths", tuple(int(n) for n in self.lengths))
        if not self.lengths:
            raise ValueError("a partition needs at least one segment")
        if any(n < 1 for n in self.lengths):
            raise ValueError(f"every segment needs at least one token: {list(self.lengths)}")

    @property
    def total(self) -> int:
        return sum(self.lengths)

    @property
    def segments(self) -> int:
        return len(self.lengths)

    def to_dict(self) -> dict[str, Any]:
        return {
            "lengths": list(self.lengths),
            "imbalance": None if self.imbalance is None else fraction_str(self.imbalance),
            "imbalance_float": None if self.imbalance is None else float(self.imbalance),
        }


def segment_prefix(partition: SequencePartition | tuple[int, ...] | list[int], i: int) -> int:
    """Tokens in segments ``1..i``; ``segment_prefix(p, 0) == 0``."""
    lengths = partition.lengths if isinstance(partition, SequencePartition) else tuple(partition)
    if not 0 <= i <= len(lengths):
        raise IndexError(f"segment index {i} outside [1, {len(lengths)}]")
    return sum(lengths[:i])


def segment_flops(cfg: ScenarioConfig, length: int, prefix: int) -> int:
    """Training-forward FLOPs of a segment of ``length`` tokens ending at ``prefix``.

    Dense term ``2 * n_i * params`` plus causal attention over every token up to
    and including this segment, ``2 * L * n_i * prefix * d``.
    """
    return 2 * length * cfg.param_count + 2 * cfg.layers * length * prefix * cfg.hidden_dim


def forward_cost(cfg: ScenarioConfig, partition: SequencePartition, i: int) -> Fraction:
    """Per-stage forward time of segment ``i`` (1-based)."""
    if not 1 <= i <= partition.segments:
        raise IndexError(f"segment index {i} outside [1, {partition.segments}]")
    length = partition.lengths[i - 1]
    if cfg.stage_forward_time is not None:
        return cfg.stage_forward_time * Fraction(length, partition.total)
    flops = segment_flops(cfg, length, segment_prefix(partition, i))
    if flops == 0:
        raise ValueError("cost model is identically zero (layers*hidden_dim == 0 and param_count == 0)")
    return Fraction(flops) * cfg.time_per_flop / cfg.total_stages


def task_cost(cfg: ScenarioConfig, partition: SequencePartition, task: Task) -> Fraction:
    fwd = forward_cost(cfg, partition, task.segment)
    if task.kind is TaskKind.FORWARD:
        return fwd
    if task.kind is TaskKind.FUSED_BACKWARD:
        return cfg.backward_ratio * fwd
    if task.kind is TaskKind.INPUT_GRAD:
        return cfg.bw_split_ratio[0] * fwd
    return cfg.bw_split_ratio[1] * fwd


# Published GPT training setups; tuples keep every listed alternative,
# presets take the first sequence length and micro-batch count.
PRESET_TABLE: dict[str, dict[str, Any]] = {
    "gpt-2.7b": dict(params=2_700_000_000, layers=32, heads=32, hidden=2560,
                     seq_lens=(16384, 24576, 32768), pp=8, tp=1, micro_batches=(32, 64)),
    "gpt-7b": dict(params=7_000_000_000, layers=32, heads=32, hidden=4096,
                   seq_lens=(32768, 65536, 131072), pp=4, tp=8, micro_batches=(16, 32)),
    "gpt-13b": dict(params=13_000_000_000, layers=40, heads=40, hidden=5120,
                    seq_lens=(32768, 65536, 131072), pp=4, tp=8, micro_batches=(16, 32)),
    "gpt-30b": dict(params=30_000_000_000, layers=64, heads=64, hidden=6144,
                    seq_lens=(32768, 49152, 65536), pp=8, tp=8, micro_batches=(32, 64)),
}

# the experiments split every sequence four ways
PRESET_SEGMENTS = 4


def preset(name: str, **overrides: Any) -> ScenarioConfig:
    try:
        row = PRESET_TABLE[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_TABLE)}") from None
    values: dict[str, Any] = dict(
        pipeline_size=row["pp"],
        micro_batches=row["micro_batches"][0],
        seq_len=row["seq_lens"][0],
        layers=row["layers"],
        hidden_dim=row["hidden"],
        param_count=row["params"],
        segments=PRESET_SEGMENTS,
    )
    values.update(overrides)
    return ScenarioConfig.from_dict(values)


def _parse_value(key: str, value: Any) -> Any:
    if key == "bw_split_ratio":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(as_fraction(v) for v in value)
    return value


def config_from_mapping(data: Mapping[str, Any]) -> ScenarioConfig:
    """Build a config from flat keys; an optional ``preset`` key supplies defaults."""
    data = dict(data)
    name = data.pop("preset", None)
    parsed = {k: _parse_value(k, v) for k, v in data.items()}
    if name is not None:
        return preset(name, **parsed)
    return ScenarioConfig.from_dict(parsed)


def load_config(path: str | Path) -> ScenarioConfig:
    """Read a flat TOML file (``key = value`` per line) into a ScenarioConfig."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config must be flat; found tables {nested}")
    return config_from_mapping(data)
