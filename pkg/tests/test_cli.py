import csv
import io
import json

import pytest

from seqpipe.cli import main
from seqpipe.gantt import render_ascii, render_svg
from seqpipe.schedules import generate, uniform_config
from seqpipe.simengine import simulate

UNIFORM = ["--set", "seq_len=240", "--set", "layers=1", "--set", "hidden_dim=1", "--set", "stage_forward_time=1"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_preset_with_svg(tmp_path, capsys):
    report, svg = tmp_path / "r.json", tmp_path / "g.svg"
    code, _, _ = run(capsys, "simulate", "--preset", "gpt-2.7b", "--kind", "Seq1F1B", "--gantt", "svg",
                     "--gantt-out", str(svg), "--out", str(report), "--memory-stride", "50")
    assert code == 0
    data = json.loads(report.read_text())
    assert data["kind"] == "Seq1F1B" and len(data["devices"]) == 8
    assert data["partition"]["lengths"] == sorted(data["partition"]["lengths"], reverse=True)
    text = svg.read_text()
    assert text.count(">dev") == 8 and "kind colors" in text


def test_simulate_ascii_phase_structure(capsys):
    code, out, _ = run(capsys, "simulate", "--kind", "1F1B", "--set", "pipeline_size=4", "--set", "micro_batches=8",
                       *UNIFORM, "--gantt", "ascii", "--out", "-")
    assert code == 0
    rows = [line for line in out.splitlines() if line.startswith("dev")]
    assert len(rows) == 4
    # warm-up staircase: device i starts after i-1 forward slots
    assert [row.split("|")[1].index("F1.1") for row in rows] == [0, 4, 8, 12]
    assert "F1.1B1.1bbbbF2.1B2.1" in rows[3]


def test_bad_kind_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--preset", "gpt-2.7b", "--kind", "2F2B"])
    assert exc.value.code == 2


def test_bad_config_is_runtime_error(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text("pipeline_size = 0\nmicro_batches = 1\nseq_len = 4\nlayers = 1\nhidden_dim = 1\n")
    code, _, err = run(capsys, "simulate", str(path), "--kind", "1F1B")
    assert code == 1 and "pipeline_size" in err
    path.write_text("pipeline_size = = 0\n")
    assert run(capsys, "simulate", str(path), "--kind", "1F1B")[0] == 1


def test_config_file_with_overrides(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text('preset = "gpt-7b"\nmicro_batches = 8\n')
    code, out, _ = run(capsys, "simulate", str(path), "--kind", "1F1B", "--set", "micro_batches=6")
    assert code == 0 and json.loads(out)["config"]["micro_batches"] == 6


def test_validate_flag_passes(capsys):
    code, out, _ = run(capsys, "simulate", "--preset", "gpt-7b", "--kind", "SeqZB1P", "--validate")
    assert code == 0 and json.loads(out)["kind"] == "SeqZB1P"


def test_sweep_rows_and_directions(capsys):
    code, out, _ = run(capsys, "sweep", "--preset", "gpt-2.7b", "--kinds", "1F1B,Seq1F1B", "--segments", "1,4")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 4
    by = {(r["kind"], r["segments"]): r for r in rows}
    seq, base = by[("Seq1F1B", "4")], by[("1F1B", "4")]
    assert float(seq["bubble_ratio"]) < float(base["bubble_ratio"])
    assert float(seq["max_peak_memory"]) < float(base["max_peak_memory"])


def test_sweep_empty_grid_is_header_only(capsys):
    code, out, _ = run(capsys, "sweep", "--preset", "gpt-2.7b", "--kinds", "")
    assert code == 0 and out.count("\n") == 1 and out.startswith("status,kind")
    code, out, _ = run(capsys, "sweep", "--preset", "gpt-2.7b", "--micro-batches", "")
    assert out.count("\n") == 1


def test_sweep_skips_infeasible_points(capsys):
    code, out, _ = run(capsys, "sweep", *UNIFORM, "--set", "pipeline_size=4", "--set", "micro_batches=8",
                       "--kinds", "1F1B-I,GPipe", "--stages-per-device", "1,2", "--micro-batches", "2,8")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 8
    skipped = [r for r in rows if r["status"].startswith("skip:")]
    assert {(r["kind"], r["stages_per_device"]) for r in skipped} == {("1F1B-I", "1"), ("GPipe", "2")}
    # small-batch points still report: with M <= P 1F1B-I behaves like GPipe
    assert all(r["status"] == "ok" for r in rows if r["kind"] == "1F1B-I" and r["stages_per_device"] == "2")


def test_sweep_parallel_matches_serial(capsys):
    args = ["sweep", *UNIFORM, "--set", "pipeline_size=2", "--set", "micro_batches=4", "--kinds", "1F1B,Seq1F1B,ZB1P",
            "--segments", "1,2", "--micro-batches", "1,4"]
    serial = run(capsys, *args)[1]
    parallel = run(capsys, *args, "--jobs", "2")[1]
    assert serial == parallel


def test_partition_command(capsys):
    base = ["--set", "pipeline_size=1", "--set", "micro_batches=1", "--set", "seq_len=100", "--set", "layers=1",
            "--set", "hidden_dim=1", "--segments", "2"]
    code, out, _ = run(capsys, "partition", *base)
    data = json.loads(out)
    assert code == 0 and data["lengths"] == [62, 38] and data["costs"] == ["7688", "7600"]
    assert json.loads(run(capsys, "partition", *base, "--method", "even")[1])["imbalance"] == "2/3"
    assert json.loads(run(capsys, "partition", *base, "--method", "oracle")[1])["lengths"] == [62, 38]


def test_generate_then_validate(tmp_path, capsys):
    path = tmp_path / "s.json"
    code, _, _ = run(capsys, "generate", *UNIFORM, "--set", "pipeline_size=4", "--set", "micro_batches=8",
                     "--set", "segments=2", "--kind", "Seq1F1B", "--out", str(path))
    assert code == 0
    code, out, _ = run(capsys, "validate", str(path), "--warmup")
    assert code == 0 and json.loads(out)["ok"]
    data = json.loads(path.read_text())
    data["devices"][3][1], data["devices"][3][2] = data["devices"][3][2], data["devices"][3][1]
    path.write_text(json.dumps(data))
    code, out, err = run(capsys, "validate", str(path))
    assert code == 3 and out == ""
    assert json.loads(err)["violations"]


def test_compare_command(capsys):
    code, out, _ = run(capsys, "compare", "--preset", "gpt-2.7b", "--kinds", "1F1B,Seq1F1B,1F1B-I,Seq1F1B-I")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["kind"] for r in rows] == ["1F1B", "Seq1F1B", "1F1B-I", "Seq1F1B-I"]
    assert rows[0]["makespan_ratio"] == "1"


def test_outputs_are_byte_identical(tmp_path, capsys):
    outs = []
    for run_id in range(2):
        d = tmp_path / str(run_id)
        d.mkdir()
        main(["simulate", "--preset", "gpt-7b", "--kind", "Seq1F1B-I", "--set", "stages_per_device=2",
              "--out", str(d / "r.json"), "--gantt", "svg", "--gantt-out", str(d / "g.svg")])
        main(["sweep", "--preset", "gpt-7b", "--kinds", "1F1B,SeqZB1P", "--segments", "2,4", "--out", str(d / "s.csv")])
        outs.append([(d / n).read_bytes() for n in ("r.json", "g.svg", "s.csv")])
    assert outs[0] == outs[1]


def test_stamp_adds_timestamp(capsys):
    code, out, _ = run(capsys, "simulate", "--preset", "gpt-7b", "--kind", "1F1B", "--stamp")
    assert "generated_at" in json.loads(out)


def test_gantt_renderers_label_units():
    r = simulate(generate(uniform_config(2, 3, 2), "SeqZB1P"))
    text = render_ascii(r)
    assert "F1.1" in text and "I1.2" in text and "W" in text
    svg = render_svg(r)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "<title>W(1,1,s1)</title>" in svg
