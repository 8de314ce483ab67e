"""Print bubble ratio and peak memory of several schedules on every preset."""

from __future__ import annotations

import argparse

from seqpipe import ScheduleKind, cwp_partition, generate, preset, simulate
from seqpipe.core import PRESET_TABLE


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--kinds", default="1F1B,Seq1F1B,ZB1P,SeqZB1P")
    args = parser.parse_args()
    kinds = [ScheduleKind.parse(k) for k in args.kinds.split(",")]
    print(f"{'preset':<10}{'kind':<10}{'bubble':>10}{'peak memory':>16}{'makespan':>14}")
    for name in sorted(PRESET_TABLE):
        cfg = preset(name)
        for kind in kinds:
            part = cwp_partition(cfg) if kind.is_sequence else None
            report = simulate(generate(cfg, kind, part), cfg, part)
            print(
                f"{name:<10}{kind.value:<10}{float(report.bubble_ratio):>10.4f}"
                f"{float(report.max_peak_memory):>16.0f}{float(report.makespan):>14.4g}"
            )


if __name__ == "__main__":
    main()
