"""Sequence partitioning: even split, FLOPs-balanced split, brute-force oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import ScenarioConfig, SequencePartition, forward_cost

BISECT_RTOL = 1e-6
BISECT_MAX_ITER = 200

ORACLE_MAX_TOKENS = 512
ORACLE_MAX_SEGMENTS = 4


def imbalance_of(costs: list[Fraction]) -> Fraction:
    """``(max - min) / mean`` of per-segment costs."""
    total = sum(costs, Fraction(0))
    if total == 0:
        raise ValueError("imbalance undefined for all-zero costs")
    return len(costs) * (max(costs) - min(costs)) / total


def segment_costs(cfg: ScenarioConfig, lengths: tuple[int, ...] | list[int]) -> list[Fraction]:
    part = SequencePartition(tuple(lengths))
    return [forward_cost(cfg, part, i) for i in range(1, part.segments + 1)]


def evaluate(cfg: ScenarioConfig, lengths: tuple[int, ...] | list[int]) -> SequencePartition:
    """Wrap ``lengths`` into a partition carrying its imbalance under ``cfg``."""
    if sum(lengths) != cfg.seq_len:
        raise ValueError(f"lengths sum to {sum(lengths)}, expected seq_len={cfg.seq_len}")
    return SequencePartition(tuple(lengths), imbalance_of(segment_costs(cfg, lengths)))


def even_partition(n: int, k: int, cfg: ScenarioConfig | None = None) -> SequencePartition:
    """Split ``n`` tokens into ``k`` near-equal spans, remainder to the earliest."""
    if k < 1:
        raise ValueError(f"need at least one segment, got k={k}")
    if n < k:
        raise ValueError(f"cannot split {n} tokens into {k} non-empty segments")
    base, extra = divmod(n, k)
    lengths = tuple(base + 1 if i < extra else base for i in range(k))
    if cfg is not None:
        return evaluate(cfg, lengths)
    return SequencePartition(lengths)


def _continuous_lengths(cfg: ScenarioConfig, target: float) -> list[float]:
    # cost_i(x) = a*x^2 + (2*params + a*prefix_{i-1})*x, a = 2*L*d
    a = 2.0 * cfg.layers * cfg.hidden_dim
    prefix = 0.0
    out = []
    for _ in range(cfg.segments):
        b = 2.0 * cfg.param_count + a * prefix
        if a > 0:
            x = 2.0 * target / (b + math.sqrt(b * b + 4.0 * a * target))
        else:
            x = target / b
        out.append(x)
        prefix += x
    return out


def _largest_remainder(values: list[float], total: int) -> list[int]:
    floors = [math.floor(v) for v in values]
    short = total - sum(floors)
    # ties go to the earlier segment
    order = sorted(range(len(values)), key=lambda i: (-(values[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return floors


def _repair_empty(lengths: list[int]) -> list[int]:
    lengths = list(lengths)
    while 0 in lengths:
        donor = max(range(len(lengths)), key=lambda i: (lengths[i], -i))
        lengths[donor] -= 1
        lengths[lengths.index(0)] += 1
    return lengths


def cwp_partition(cfg: ScenarioConfig) -> SequencePartition:
    """Computation-wise partition: segment lengths with (near) equal forward FLOPs.

    Bisects on the common per-segment cost. For a given target each segment
    length is the positive root of its quadratic cost; the target is adjusted
    until the lengths add up to ``seq_len``, then rounded by largest remainder.
    """
    n, k = cfg.seq_len, cfg.segments
    if n < k:
        raise ValueError(f"cannot split {n} tokens into {k} non-empty segments")
    if cfg.stage_forward_time is not None:
        # linear cost: balance means equal length
        return even_partition(n, k, cfg)
    if cfg.layers * cfg.hidden_dim == 0 and cfg.param_count == 0:
        raise ValueError("cost model is identically zero; nothing to balance")
    if k == 1:
        return evaluate(cfg, (n,))

    a = 2.0 * cfg.layers * cfg.hidden_dim
    lo, hi = 0.0, a * n * n + 2.0 * cfg.param_count * n
    lengths = _continuous_lengths(cfg, hi)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        lengths = _continuous_lengths(cfg, mid)
        total = sum(lengths)
        if abs(total - n) <= BISECT_RTOL * n:
            break
        if total < n:
            lo = mid
        else:
            hi = mid
    # rescale the last iterate so the rounding sees an exact total
    scale = n / sum(lengths)
    rounded = _largest_remainder([x * scale for x in lengths], n)
    return evaluate(cfg, tuple(_repair_empty(rounded)))


def _compositions_block(n: int, k: int, head: tuple[int, ...]) -> np.ndarray:
    """All compositions of ``n`` into ``k`` positive parts starting with ``head``.

    Up to three trailing free parts are enumerated as a numpy grid; returns an
    ``(m, k)`` int64 array.
    """
    rest = n - sum(head)
    free = k - len(head)
    if free == 1:
        rows = [head + (rest,)] if rest >= 1 else []
        return np.array(rows, dtype=np.int64).reshape(-1, k)
    if free == 2:
        x = np.arange(1, rest, dtype=np.int64)
        cols = [x, rest - x]
    else:
        x, y = np.meshgrid(np.arange(1, rest, dtype=np.int64), np.arange(1, rest, dtype=np.int64), indexing="ij")
        x, y = x.ravel(), y.ravel()
        ok = x + y <= rest - 1
        x, y = x[ok], y[ok]
        cols = [x, y, rest - x - y]
    block = np.empty((cols[0].size, k), dtype=np.int64)
    block[:, : len(head)] = head
    for j, col in enumerate(cols):
        block[:, len(head) + j] = col
    return block


def _grid_costs(cfg: ScenarioConfig, comps: np.ndarray) -> np.ndarray:
    prefix = np.cumsum(comps, axis=1)
    return 2 * comps * cfg.param_count + 2 * cfg.layers * cfg.hidden_dim * comps * prefix


def oracle_partition(cfg: ScenarioConfig) -> SequencePartition:
    """Exhaustive search over every composition of ``seq_len`` into ``segments`` parts.

    Returns the minimum-imbalance composition; ties go to the lexicographically
    smallest lengths. Independent of :func:`cwp_partition` by construction.
    """
    n, k = cfg.seq_len, cfg.segments
    if n > ORACLE_MAX_TOKENS or k > ORACLE_MAX_SEGMENTS:
        raise ValueError(
            f"oracle limited to seq_len <= {ORACLE_MAX_TOKENS} and segments <= {ORACLE_MAX_SEGMENTS}"
        )
    if n < k:
        raise ValueError(f"cannot split {n} tokens into {k} non-empty segments")
    if k == 1:
        return evaluate(cfg, (n,))
    if cfg.stage_forward_time is None and cfg.layers * cfg.hidden_dim == 0 and cfg.param_count == 0:
        raise ValueError("cost model is identically zero; nothing to balance")

    best_val = math.inf
    candidates: list[tuple[int, ...]] = []
    fixed = max(0, k - 3)
    heads = itertools.product(range(1, n + 1), repeat=fixed) if fixed else [()]
    for head in heads:
        if sum(head) > n - (k - fixed):
            continue
        comps = _compositions_block(n, k, tuple(head))
        if comps.shape[0] == 0:
            continue
        if cfg.stage_forward_time is not None:
            costs = comps.astype(np.float64)
        else:
            costs = _grid_costs(cfg, comps).astype(np.float64)
        imb = k * (costs.max(axis=1) - costs.min(axis=1)) / costs.sum(axis=1)
        low = float(imb.min())
        # float screening only; the final pick below is exact
        tol = 1e-9 * max(low, best_val if best_val < math.inf else low) + 1e-15
        if low > best_val + tol:
            continue
        if low < best_val - tol:
            candidates = []
        best_val = min(best_val, low)
        keep = comps[imb <= best_val + tol]
        candidates.extend(tuple(int(v) for v in row) for row in keep)

    scored = [(evaluate(cfg, c).imbalance, c) for c in candidates]
    best_imb = min(s for s, _ in scored)
    best = min(c for s, c in scored if s == best_imb)
    return SequencePartition(best, best_imb)


@dataclass(frozen=True)
class BalanceReport:
    lengths: tuple[int, ...]
    costs: tuple[Fraction, ...]
    imbalance: Fraction

    def to_dict(self) -> dict:
        return {
            "lengths": list(self.lengths),
            "costs": [str(c) for c in self.costs],
            "imbalance": str(self.imbalance),
            "imbalance_float": float(self.imbalance),
        }


def balance_report(partition: SequencePartition, cfg: ScenarioConfig) -> BalanceReport:
    costs = segment_costs(cfg, partition.lengths)
    return BalanceReport(partition.lengths, tuple(costs), imbalance_of(costs))


def rounding_slack(partition: SequencePartition, cfg: ScenarioConfig) -> Fraction:
    """Largest imbalance change from moving one token across any segment boundary."""
    base = imbalance_of(segment_costs(cfg, partition.lengths))
    lengths = list(partition.lengths)
    slack = Fraction(0)
    for i in range(len(lengths) - 1):
        for src, dst in ((i, i + 1), (i + 1, i)):
            if lengths[src] <= 1:
                continue
            moved = list(lengths)
            moved[src] -= 1
            moved[dst] += 1
            slack = max(slack, abs(imbalance_of(segment_costs(cfg, moved)) - base))
    return slack
