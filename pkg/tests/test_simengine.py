import json
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from seqpipe.core import ScenarioConfig, SequencePartition, TaskKind, make_task
from seqpipe.partition import even_partition
from seqpipe.schedules import Schedule, ScheduleKind, generate, uniform_config, warmup_1f1b
from seqpipe.simengine import (
    DeadlockError,
    IncompleteScheduleError,
    compare,
    critical_path,
    dependencies,
    simulate,
)

F, B = TaskKind.FORWARD, TaskKind.FUSED_BACKWARD


def test_dependency_examples():
    cfg = uniform_config(2, 3, 2)
    assert dependencies(make_task(F, 1, 1, 1, cfg), cfg) == frozenset()
    assert dependencies(make_task(F, 3, 2, 2, cfg), cfg) == {make_task(F, 3, 2, 1, cfg), make_task(F, 3, 1, 2, cfg)}
    assert dependencies(make_task(B, 1, 2, 2, cfg), cfg) == {make_task(F, 1, 2, 2, cfg)}
    assert dependencies(make_task(B, 1, 1, 1, cfg), cfg) == {
        make_task(B, 1, 2, 1, cfg),
        make_task(B, 1, 1, 2, cfg),
        make_task(F, 1, 1, 1, cfg),
    }
    w = make_task(TaskKind.WEIGHT_GRAD, 2, 1, 1, cfg)
    assert dependencies(w, cfg) == {make_task(TaskKind.INPUT_GRAD, 2, 1, 1, cfg)}


def test_1f1b_two_devices_closed_form():
    r = simulate(generate(uniform_config(2, 2), "1F1B"))
    assert r.makespan == (2 + 2 - 1) * (1 + 2)


def test_gpipe_same_makespan_more_memory_held_longer():
    cfg = uniform_config(2, 2)
    g = simulate(generate(cfg, "GPipe"))
    o = simulate(generate(cfg, "1F1B"))
    assert g.makespan == 9 and o.makespan == 9
    assert g.peak_memory[0] == 2 * cfg.seq_len
    assert o.peak_memory[0] <= 2 * cfg.seq_len


@pytest.mark.parametrize("P", [1, 2, 3, 5])
def test_single_micro_batch_chain(P):
    r = simulate(generate(uniform_config(P, 1), "1F1B"))
    assert r.makespan == P * 3
    # device i waits for the chain to reach the end and come back: 3(P - i)
    for i in range(1, P + 1):
        assert r.per_device_bubble[i - 1] == 3 * (P - i)
    assert r.bubble_ratio == Fraction(P - 1, P)


def test_seq1f1b_hand_trace():
    # hand trace on two devices: 8 half-cost units per device, staggered by one unit
    r = simulate(generate(uniform_config(2, 4, 2), "Seq1F1B"))
    assert r.makespan == Fraction(27, 2)
    assert r.per_device_bubble[0] == Fraction(3, 2)


@pytest.mark.parametrize("P,M", [(2, 2), (2, 5), (4, 8), (4, 4), (8, 16), (3, 7)])
def test_1f1b_uniform_closed_form(P, M):
    r = simulate(generate(uniform_config(P, M), "1F1B"))
    assert r.makespan == (M + P - 1) * 3
    assert r.per_device_bubble[0] == (P - 1) * 3


@pytest.mark.parametrize("P,M,k", [(2, 4, 2), (4, 8, 2), (4, 8, 4), (8, 16, 4), (3, 9, 3)])
def test_seq1f1b_bubble_shrinks_by_segments(P, M, k):
    r = simulate(generate(uniform_config(P, M, k), "Seq1F1B"))
    assert r.per_device_bubble[0] == Fraction((P - 1) * 3, k)


@pytest.mark.parametrize("P,M", [(2, 3), (3, 6), (4, 8), (4, 5)])
def test_1f1b_peak_is_one_above_warmup(P, M):
    cfg = uniform_config(P, M)
    r = simulate(generate(cfg, "1F1B"))
    for d in range(P):
        assert r.peak_memory[d] == (warmup_1f1b(P, M, d + 1) + 1) * cfg.seq_len
        assert r.warmup_memory[d] == (warmup_1f1b(P, M, d + 1) + 1) * cfg.seq_len


def test_comm_latency_adds_to_cross_device_edges():
    r = simulate(generate(uniform_config(3, 1, comm_latency=1), "1F1B"))
    # 3 forwards, 3 backwards, 4 device hops
    assert r.makespan == 3 * 3 + 4


def test_deadlock_reported_with_cycle():
    cfg = uniform_config(2, 2)
    s = generate(cfg, "1F1B")
    orders = [list(o) for o in s.device_orders]
    # device 2 runs the backward of micro-batch 2 before micro-batch 1's forward
    orders[1] = [make_task(F, 2, 1, 2, cfg), make_task(B, 2, 1, 2, cfg), make_task(F, 1, 1, 2, cfg), make_task(B, 1, 1, 2, cfg)]
    orders[0] = [make_task(F, 1, 1, 1, cfg), make_task(B, 1, 1, 1, cfg), make_task(F, 2, 1, 1, cfg), make_task(B, 2, 1, 1, cfg)]
    with pytest.raises(DeadlockError) as exc:
        simulate(Schedule(cfg, s.kind, tuple(map(tuple, orders))))
    assert exc.value.cycle


def test_missing_task_reported():
    cfg = uniform_config(2, 1)
    s = generate(cfg, "1F1B")
    broken = Schedule(cfg, s.kind, (s.device_orders[0], s.device_orders[1][1:]))
    with pytest.raises(IncompleteScheduleError):
        simulate(broken)


def check_report(r, cfg):
    deps_ok = all(
        r.task_times[t][0] >= r.task_times[d][1] + (cfg.comm_latency if d.device != t.device else 0)
        for t in r.task_times
        for d in dependencies(t, cfg, r.partition.segments)
    )
    assert deps_ok
    for d, order in enumerate(r.device_orders):
        spans = [r.task_times[t] for t in order]
        assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
        assert r.per_device_busy[d] == sum((e - s for s, e in spans), Fraction(0))
        series = r.memory_series[d]
        assert all(v >= 0 for _, v in series)
        boundaries = {e for _, e in spans} | {Fraction(0)}
        assert all(t in boundaries for t, _ in series)
        assert series[-1][1] == 0
    assert r.makespan >= max(r.per_device_busy)


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(list(ScheduleKind)),
    st.integers(1, 4),
    st.integers(1, 6),
    st.integers(1, 3),
    st.integers(0, 2),
)
def test_simulation_invariants(kind, P, M, k, comm):
    n_v = 2 if kind.is_interleaved else 1
    cfg = ScenarioConfig(
        pipeline_size=P, micro_batches=M, segments=k, stages_per_device=n_v,
        seq_len=60, layers=2, hidden_dim=3, param_count=7, comm_latency=comm,
    )
    try:
        s = generate(cfg, kind)
    except ValueError:
        return
    r = simulate(s)
    check_report(r, cfg)
    assert r.makespan >= critical_path(s)


def test_report_json_and_stride():
    r = simulate(generate(uniform_config(4, 8, 2), "Seq1F1B"))
    full = json.loads(r.to_json())
    thin = json.loads(r.to_json(memory_stride=5))
    assert full["makespan"] == str(r.makespan)
    assert len(thin["devices"][0]["memory_series"]) < len(full["devices"][0]["memory_series"])
    peak = max(Fraction(v) for _, v in thin["devices"][0]["memory_series"])
    assert peak == r.peak_memory[0]
    times = [Fraction(t) for t, _ in thin["devices"][0]["memory_series"]]
    assert times == sorted(times)
    assert r.to_json() == r.to_json()


def test_throughput_is_tokens_over_time():
    cfg = uniform_config(2, 2)
    r = simulate(generate(cfg, "1F1B"))
    assert r.modeled_throughput == Fraction(2 * cfg.seq_len, 9)


def test_compare_bubble_ratio_direction():
    cfg = uniform_config(4, 8, 4)
    table = compare([simulate(generate(cfg, "1F1B")), simulate(generate(cfg, "Seq1F1B"))])
    base, seq = table.rows
    assert base["makespan_ratio"] == 1
    assert seq["bubble_ratio"] < base["bubble_ratio"]
    assert "kind,pipeline_size" in table.to_csv()


def test_compare_identical_reports_have_unit_ratios():
    r = simulate(generate(uniform_config(2, 3), "1F1B"))
    for row in compare([r, r]).rows:
        assert row["makespan_ratio"] == row["bubble_ratio_ratio"] == row["peak_memory_ratio"] == row["throughput_ratio"] == 1


def test_compare_cwp_beats_even_on_preset_like_config():
    cfg = ScenarioConfig(pipeline_size=4, micro_batches=8, seq_len=4096, layers=32, hidden_dim=2560, param_count=2_700_000_000, segments=4)
    even = even_partition(cfg.seq_len, 4, cfg)
    r_even = simulate(generate(cfg, "Seq1F1B", even), cfg, even)
    r_cwp = simulate(generate(cfg, "Seq1F1B"), cfg)
    table = compare([r_even, r_cwp])
    assert table.rows[1]["makespan_ratio"] < 1


def test_compare_rejects_mismatch():
    a = simulate(generate(uniform_config(2, 3), "1F1B"))
    b = simulate(generate(uniform_config(2, 4), "1F1B"))
    with pytest.raises(ValueError):
        compare([a, b])
    assert compare([a, b], allow_mismatch=True)
    with pytest.raises(ValueError):
        compare([a])


def test_partition_must_match_segments():
    cfg = uniform_config(2, 2, 2)
    with pytest.raises(ValueError):
        simulate(generate(cfg, "Seq1F1B"), cfg, SequencePartition((240,)))
