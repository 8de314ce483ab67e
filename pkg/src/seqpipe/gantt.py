"""Timeline rendering of a simulated schedule: SVG and plain text."""

from __future__ import annotations

import math
from fractions import Fraction
from xml.sax.saxutils import escape

from .core import TaskKind
from .simengine import SimReport

KIND_COLORS = {
    TaskKind.FORWARD: "#4e79a7",
    TaskKind.FUSED_BACKWARD: "#59a14f",
    TaskKind.INPUT_GRAD: "#59a14f",
    TaskKind.WEIGHT_GRAD: "#f28e2b",
}

ROW_HEIGHT = 28
LEFT_MARGIN = 60
TOP_MARGIN = 40
PLOT_WIDTH = 1200

ASCII_CELL = 4
ASCII_MAX_WIDTH = 480


def _num(x: float) -> str:
    # fixed precision keeps the SVG byte-identical across runs
    return f"{x:.2f}".rstrip("0").rstrip(".")


def render_svg(report: SimReport) -> str:
    makespan = report.makespan or Fraction(1)
    scale = PLOT_WIDTH / float(makespan)
    n_dev = report.pipeline_size
    height = TOP_MARGIN + n_dev * ROW_HEIGHT + 30
    width = LEFT_MARGIN + PLOT_WIDTH + 20
    legend = ", ".join(f"{kind.code}={kind.value}:{color}" for kind, color in KIND_COLORS.items())
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">',
        f"<!-- kind colors: {legend} -->",
        f'<text x="{LEFT_MARGIN}" y="16">{escape(report.kind)}  makespan={float(report.makespan):.6g}  '
        f"bubble={float(report.bubble_ratio):.4f}</text>",
    ]
    for d, order in enumerate(report.device_orders):
        y = TOP_MARGIN + d * ROW_HEIGHT
        out.append(f'<text x="4" y="{y + ROW_HEIGHT // 2 + 4}">dev{d + 1}</text>')
        out.append(
            f'<rect x="{LEFT_MARGIN}" y="{y}" width="{PLOT_WIDTH}" height="{ROW_HEIGHT - 4}" fill="#eeeeee"/>'
        )
        for task in order:
            start, end = report.task_times[task]
            x = LEFT_MARGIN + float(start) * scale
            w = float(end - start) * scale
            color = KIND_COLORS[task.kind]
            out.append(
                f'<rect x="{_num(x)}" y="{y}" width="{_num(w)}" height="{ROW_HEIGHT - 4}" '
                f'fill="{color}" stroke="#ffffff" stroke-width="0.5"><title>{escape(str(task))}</title></rect>'
            )
            if w >= 6 * len(task.label):
                out.append(
                    f'<text x="{_num(x + w / 2)}" y="{y + ROW_HEIGHT // 2 + 2}" text-anchor="middle" '
                    f'fill="#ffffff">{task.label}</text>'
                )
    axis_y = TOP_MARGIN + n_dev * ROW_HEIGHT + 14
    out.append(f'<text x="{LEFT_MARGIN}" y="{axis_y}">0</text>')
    out.append(f'<text x="{LEFT_MARGIN + PLOT_WIDTH}" y="{axis_y}" text-anchor="end">{float(makespan):.6g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _quantum(report: SimReport) -> Fraction | None:
    """Largest time step that every start and end is a multiple of, if the grid stays narrow."""
    times = [t for pair in report.task_times.values() for t in pair]
    den = math.lcm(*(t.denominator for t in times)) if times else 1
    step = 0
    for t in times:
        step = math.gcd(step, int(t * den))
    if step == 0:
        return None
    q = Fraction(step, den)
    if report.makespan / q * ASCII_CELL > ASCII_MAX_WIDTH:
        return None
    return q


def render_ascii(report: SimReport) -> str:
    """One text row per device.

    On a fine enough grid every task is written as its kind code and ``m.s``
    label padded to its duration, idle time as ``.``. Otherwise each column
    shows the kind code of the task covering its midpoint.
    """
    q = _quantum(report)
    lines = [f"# {report.kind} makespan={report.makespan} F=forward B=backward I=input_grad W=weight_grad .=idle"]
    for d, order in enumerate(report.device_orders):
        if q is not None:
            cells = int(report.makespan / q)
            row = ["." * ASCII_CELL] * cells
            for task in order:
                start, end = report.task_times[task]
                a, b = int(start / q), int(end / q)
                text = (task.kind.code + task.label).ljust((b - a) * ASCII_CELL, task.kind.code.lower())
                for j in range(a, b):
                    row[j] = text[(j - a) * ASCII_CELL : (j - a + 1) * ASCII_CELL]
            body = "".join(row)
        else:
            cols = ASCII_MAX_WIDTH
            step = report.makespan / cols
            body_chars = ["."] * cols
            for task in order:
                start, end = report.task_times[task]
                lo = math.ceil(start / step - Fraction(1, 2))
                hi = math.ceil(end / step - Fraction(1, 2))
                for j in range(max(lo, 0), min(hi, cols)):
                    body_chars[j] = task.kind.code
            body = "".join(body_chars)
        lines.append(f"dev{d + 1:<3}|{body}|")
    return "\n".join(lines) + "\n"
