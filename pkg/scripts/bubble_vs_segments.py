"""Bubble ratio of Seq1F1B as the number of sequence segments grows, cwp against even splits."""

from __future__ import annotations

import argparse

from seqpipe import ScheduleKind, cwp_partition, even_partition, generate, preset, simulate
from seqpipe.core import PRESET_TABLE


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", default="gpt-2.7b", choices=sorted(PRESET_TABLE))
    parser.add_argument("--max-segments", type=int, default=8)
    args = parser.parse_args()
    base = preset(args.preset)
    print(f"{'segments':>8}{'cwp bubble':>12}{'even bubble':>13}{'cwp makespan':>15}{'even makespan':>15}")
    for k in range(1, args.max_segments + 1):
        cfg = base.with_(segments=k)
        row = []
        for part in (cwp_partition(cfg), even_partition(cfg.seq_len, k, cfg)):
            report = simulate(generate(cfg, ScheduleKind.SEQ1F1B, part), cfg, part)
            row.append(report)
        print(
            f"{k:>8}{float(row[0].bubble_ratio):>12.4f}{float(row[1].bubble_ratio):>13.4f}"
            f"{float(row[0].makespan):>15.4g}{float(row[1].makespan):>15.4g}"
        )


if __name__ == "__main__":
    main()
