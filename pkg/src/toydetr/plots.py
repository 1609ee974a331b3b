"""Static SVG line charts from the metric CSVs.

Two inputs are understood, told apart by their header:

* ``iou_threshold,recall,precision``: one curve per IoU threshold;
* ``layer,group,value,cdf``: one curve per (layer, group).

Several files can be overlaid in one chart, e.g. a diagnostic with and
without a mechanism. Axes and ticks are ``<line>``/``<text>`` elements and
every curve is exactly one ``<path>``, so the output is easy to inspect.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .errors import ValidationError

PR_HEADER = ["iou_threshold", "recall", "precision"]
CDF_HEADER = ["layer", "group", "value", "cdf"]
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf"]

WIDTH, HEIGHT = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 56, 140, 28, 44


class CsvParseError(ValidationError):
    """Malformed curve CSV; the message names the file, row, and column."""


def _number(text: str, where: str, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise CsvParseError(f"{where}, column {column!r}: expected a number, got {text!r}") from None


def parse_curves(text: str, name: str = "<input>") -> dict[str, tuple[list[float], list[float]]]:
    """Curves keyed by label; an empty input (or header only) gives no curves."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return {}
    header = rows[0]
    if header == PR_HEADER:
        kind = "pr"
    elif header == CDF_HEADER:
        kind = "cdf"
    else:
        raise CsvParseError(f"{name} row 1: unrecognised header {header!r}")
    curves: dict[str, tuple[list[float], list[float]]] = {}
    for i, row in enumerate(rows[1:], start=2):
        where = f"{name} row {i}"
        if len(row) != len(header):
            raise CsvParseError(f"{where}: expected {len(header)} columns, got {len(row)}")
        if kind == "pr":
            label = f"IoU={row[0]}"
            _number(row[0], where, "iou_threshold")
            x, y = _number(row[1], where, "recall"), _number(row[2], where, "precision")
        else:
            label = f"layer {row[0]} {row[1]}"
            x, y = _number(row[2], where, "value"), _number(row[3], where, "cdf")
        xs, ys = curves.setdefault(label, ([], []))
        xs.append(x)
        ys.append(y)
    return curves


def _f(v: float) -> str:
    return f"{v:.2f}"


def line_chart(curves: dict[str, tuple[list[float], list[float]]], title: str = "", xlabel: str = "",
               ylabel: str = "") -> str:
    """Render curves on shared axes; the data range defaults to the unit square."""
    xs = [x for cx, _ in curves.values() for x in cx]
    ys = [y for _, cy in curves.values() for y in cy]
    x0, x1 = min(xs + [0.0]), max(xs + [1.0])
    y0, y1 = min(ys + [0.0]), max(ys + [1.0])
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for i in range(6):
        tx = x0 + (x1 - x0) * i / 5
        ty = y0 + (y1 - y0) * i / 5
        out.append(f'<line x1="{_f(px(tx))}" y1="{TOP + ph}" x2="{_f(px(tx))}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_f(px(tx))}" y="{TOP + ph + 16}" text-anchor="middle">{tx:.2f}</text>')
        out.append(f'<line x1="{LEFT - 4}" y1="{_f(py(ty))}" x2="{LEFT}" y2="{_f(py(ty))}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{_f(py(ty) + 4)}" text-anchor="end">{ty:.2f}</text>')
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="16" text-anchor="middle">{_escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 8}" text-anchor="middle">{_escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {TOP + ph / 2:.2f})">{_escape(ylabel)}</text>')
    for i, (label, (cx, cy)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        if cx:
            pts = " L".join(f"{_f(px(x))},{_f(py(y))}" for x, y in zip(cx, cy))
            out.append(f'<path d="M{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = TOP + 12 + 16 * i
        out.append(f'<line x1="{LEFT + pw + 10}" y1="{ly}" x2="{LEFT + pw + 28}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 32}" y="{ly + 4}">{_escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def plot_files(paths, out_path, title: str = "") -> str:
    """Overlay every curve in ``paths`` (labels prefixed by file stem when several) into one SVG."""
    paths = [Path(p) for p in paths]
    merged: dict[str, tuple[list[float], list[float]]] = {}
    kinds = set()
    for p in paths:
        text = p.read_text()
        first = text.splitlines()[0] if text.strip() else ""
        kinds.add("pr" if first == ",".join(PR_HEADER) else "cdf" if first else "")
        for label, xy in parse_curves(text, p.name).items():
            merged[f"{p.stem}: {label}" if len(paths) > 1 else label] = xy
    xlabel, ylabel = ("recall", "precision") if kinds == {"pr"} else ("value", "cumulative fraction")
    svg = line_chart(merged, title, xlabel, ylabel)
    Path(out_path).write_text(svg)
    return svg


__all__ = ["CsvParseError", "line_chart", "parse_curves", "plot_files"]
