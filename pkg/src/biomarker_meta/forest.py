"""Deterministic SVG forest plots (no plotting backend, no timestamps)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .data_model import ValidationError

__all__ = ["ForestRow", "render_forest", "layout_rows"]

LABEL_WIDTH = 270
PLOT_WIDTH = 420
ROW_HEIGHT = 22
TOP_MARGIN = 46
BOTTOM_MARGIN = 34
CAP_HALF = 4
MARKER_HALF = 4

POPULATION_COLORS = {
    "positive": "#1b7837",
    "negative": "#b2182b",
    "mixed": "#2166ac",
    "pooled": "#000000",
}

_TICK_HRS = (0.1, 0.2, 0.25, 0.33, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 8.0)


@dataclass(frozen=True)
class ForestRow:
    """One plotted interval: a study estimate or a pooled posterior."""

    label: str
    estimate: float
    lower: float
    upper: float
    population: str = "positive"
    model: str = ""

    def __post_init__(self):
        if not (self.lower <= self.estimate <= self.upper):
            raise ValidationError(
                f"row '{self.label}': need lower <= estimate <= upper, "
                f"got ({self.lower}, {self.estimate}, {self.upper})"
            )
        if self.population not in POPULATION_COLORS:
            raise ValidationError(
                f"row '{self.label}': unknown population '{self.population}'"
            )


def _x_scale(rows):
    lo = min(min(r.lower for r in rows), 0.0)
    hi = max(max(r.upper for r in rows), 0.0)
    span = max(hi - lo, 0.2)
    lo -= 0.06 * span
    hi += 0.06 * span

    def to_x(value: float) -> float:
        return LABEL_WIDTH + (value - lo) / (hi - lo) * PLOT_WIDTH

    return to_x, lo, hi


def layout_rows(rows):
    """Pixel geometry for each row; shared by the renderer and golden tests."""
    rows = list(rows)
    if not rows:
        raise ValidationError("no rows to plot")
    to_x, lo, hi = _x_scale(rows)
    geometry = []
    for i, row in enumerate(rows):
        y = TOP_MARGIN + (i + 0.5) * ROW_HEIGHT
        geometry.append(
            {
                "row": row,
                "y": y,
                "x_lo": to_x(row.lower),
                "x_est": to_x(row.estimate),
                "x_hi": to_x(row.upper),
            }
        )
    return geometry, to_x, (lo, hi)


def _f(x: float) -> str:
    return format(x, ".2f")


def render_forest(rows, path=None, title: str = "") -> str:
    """Render rows to an SVG string (and write it to ``path`` if given).

    The x axis is the log effect scale with tick labels exponentiated to the
    hazard-ratio scale; a vertical null line marks HR = 1. Output depends only
    on the inputs, so identical calls are byte-identical.
    """
    geometry, to_x, (lo, hi) = layout_rows(rows)
    height = TOP_MARGIN + ROW_HEIGHT * len(geometry) + BOTTOM_MARGIN
    width = LABEL_WIDTH + PLOT_WIDTH + 20
    axis_y = height - BOTTOM_MARGIN + 8

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        parts.append(f'<text x="{LABEL_WIDTH}" y="18" font-size="13">{_escape(title)}</text>')

    null_x = _f(to_x(0.0))
    parts.append(
        f'<line class="null" x1="{null_x}" y1="{TOP_MARGIN - 6}" x2="{null_x}" '
        f'y2="{height - BOTTOM_MARGIN}" stroke="#888888" stroke-dasharray="4,3"/>'
    )
    for hr in _TICK_HRS:
        v = math.log(hr)
        if v < lo or v > hi:
            continue
        x = _f(to_x(v))
        parts.append(
            f'<line class="tick" x1="{x}" y1="{height - BOTTOM_MARGIN}" x2="{x}" '
            f'y2="{height - BOTTOM_MARGIN + 4}" stroke="#333333"/>'
        )
        parts.append(
            f'<text class="ticklabel" x="{x}" y="{axis_y + 10}" text-anchor="middle">{hr:g}</text>'
        )
    parts.append(
        f'<text x="{_f(LABEL_WIDTH + PLOT_WIDTH / 2)}" y="{axis_y + 24}" '
        f'text-anchor="middle">hazard ratio</text>'
    )

    last_model = None
    for g in geometry:
        row: ForestRow = g["row"]
        y = _f(g["y"])
        color = POPULATION_COLORS[row.population]
        if row.model and row.model != last_model and last_model is not None:
            sep_y = _f(g["y"] - ROW_HEIGHT / 2)
            parts.append(
                f'<line class="separator" x1="10" y1="{sep_y}" x2="{width - 10}" '
                f'y2="{sep_y}" stroke="#dddddd"/>'
            )
        last_model = row.model or last_model
        label = row.label if not row.model else f"{row.label} [{row.model}]"
        parts.append(f'<text class="label" x="10" y="{_f(g["y"] + 4)}">{_escape(label)}</text>')
        parts.append(
            f'<line class="whisker" x1="{_f(g["x_lo"])}" y1="{y}" x2="{_f(g["x_hi"])}" '
            f'y2="{y}" stroke="{color}"/>'
        )
        for x_end in (g["x_lo"], g["x_hi"]):
            parts.append(
                f'<line class="cap" x1="{_f(x_end)}" y1="{_f(g["y"] - CAP_HALF)}" '
                f'x2="{_f(x_end)}" y2="{_f(g["y"] + CAP_HALF)}" stroke="{color}"/>'
            )
        if row.population == "pooled":
            x = g["x_est"]
            parts.append(
                f'<path class="marker pooled" d="M {_f(x - MARKER_HALF - 2)} {y} '
                f'L {_f(x)} {_f(g["y"] - MARKER_HALF - 2)} L {_f(x + MARKER_HALF + 2)} {y} '
                f'L {_f(x)} {_f(g["y"] + MARKER_HALF + 2)} Z" fill="{color}"/>'
            )
        else:
            parts.append(
                f'<rect class="marker" x="{_f(g["x_est"] - MARKER_HALF)}" '
                f'y="{_f(g["y"] - MARKER_HALF)}" width="{2 * MARKER_HALF}" '
                f'height="{2 * MARKER_HALF}" fill="{color}"/>'
            )
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_text(svg)
    return svg


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
