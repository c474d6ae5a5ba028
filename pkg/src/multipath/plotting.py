"""Standalone SVG line charts from experiment CSV files.

The first column is the x axis. An optional ``series`` column splits rows
into separate lines; every other column is a metric and gets its own chart.
Output is plain text with fixed number formatting, so identical input gives
byte-identical files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 320
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 56, 120, 28, 44
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


class PlotInputError(ValueError):
    pass


@dataclass
class Table:
    x_name: str
    metrics: List[str]
    # series name -> list of (x, {metric: y})
    series: Dict[str, List[Tuple[float, Dict[str, float]]]]


def _number(text: str, path, line: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise PlotInputError(f"{path}:{line}: column {column!r} is not a number: {text!r}") from None


def read_table(path) -> Table:
    """Parse a plot CSV.

    Raises:
        PlotInputError: on an empty file, a ragged row or a non-numeric cell,
            with the offending line number.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(n, r) for n, r in enumerate(rows, 1) if any(c.strip() for c in r)]
    if not rows:
        raise PlotInputError(f"{path}: empty CSV")
    _, header = rows[0]
    header = [h.strip() for h in header]
    if len(header) < 2:
        raise PlotInputError(f"{path}:1: need an x column and at least one metric column")
    if len(rows) < 2:
        raise PlotInputError(f"{path}: no data rows")
    x_name = header[0]
    has_series = "series" in header[1:]
    metrics = [h for h in header[1:] if h != "series"]
    if not metrics:
        raise PlotInputError(f"{path}:1: no metric columns")
    series: Dict[str, List[Tuple[float, Dict[str, float]]]] = {}
    for n, row in rows[1:]:
        if len(row) != len(header):
            raise PlotInputError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, (c.strip() for c in row)))
        x = _number(rec[x_name], path, n, x_name)
        ys = {m: _number(rec[m], path, n, m) for m in metrics}
        name = rec["series"] if has_series else ""
        series.setdefault(name, []).append((x, ys))
    return Table(x_name, metrics, series)


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        if v >= lo - 1e-9 * step:
            out.append(round(v, 10))
        v += step
    return out


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:g}"


def render_svg(table: Table, metric: str, title: str = "") -> str:
    """One chart of ``metric`` against the x column, one polyline per series."""
    pts = [(x, ys[metric]) for s in table.series.values() for x, ys in s if math.isfinite(ys[metric])]
    if not pts:
        raise PlotInputError(f"no finite values for {metric!r}")
    xs = [p[0] for p in pts]
    yvals = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(yvals), max(yvals)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    xt, yt = _ticks(x0, x1), _ticks(y0, y1)
    x0, x1 = min(x0, xt[0]), max(x1, xt[-1])
    y0, y1 = min(y0, yt[0]), max(y1, yt[-1])
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN_T + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="16" text-anchor="middle" font-size="13">'
                   f'{escape(title)}</text>')
    bx, by = MARGIN_L, MARGIN_T + ph
    out.append(f'<line x1="{bx}" y1="{by}" x2="{bx + pw}" y2="{by}" stroke="black"/>')
    out.append(f'<line x1="{bx}" y1="{MARGIN_T}" x2="{bx}" y2="{by}" stroke="black"/>')
    for t in xt:
        x = sx(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{by}" x2="{_fmt(x)}" y2="{by + 4}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{by + 16}" text-anchor="middle">{_label(t)}</text>')
    for t in yt:
        y = sy(t)
        out.append(f'<line x1="{bx - 4}" y1="{_fmt(y)}" x2="{bx}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<line x1="{bx}" y1="{_fmt(y)}" x2="{bx + pw}" y2="{_fmt(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{bx - 7}" y="{_fmt(y + 4)}" text-anchor="end">{_label(t)}</text>')
    out.append(f'<text x="{bx + pw / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle">'
               f'{escape(table.x_name)}</text>')
    out.append(f'<text x="14" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {MARGIN_T + ph / 2:.1f})">{escape(metric)}</text>')
    for k, (name, rows) in enumerate(table.series.items()):
        color = COLORS[k % len(COLORS)]
        line = sorted((x, ys[metric]) for x, ys in rows if math.isfinite(ys[metric]))
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in line)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in line:
            out.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="2.5" fill="{color}"/>')
        if name:
            ly = MARGIN_T + 12 + 16 * k
            lx = WIDTH - MARGIN_R + 10
            out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                       f'stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{lx + 22}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(path, out_dir, title: str = "") -> List[Path]:
    """Write ``<stem>_<metric>.svg`` for each metric column; return the paths."""
    table = read_table(path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    stem = Path(path).stem
    for m in table.metrics:
        target = out_dir / f"{stem}_{m}.svg"
        target.write_text(render_svg(table, m, title or f"{m} vs {table.x_name}"))
        written.append(target)
    return written


def polyline_points(svg: str) -> Sequence[List[Tuple[float, float]]]:
    """Parse the polylines of an SVG produced here (used by tests)."""
    lines = []
    for chunk in svg.split('points="')[1:]:
        coords = chunk.split('"', 1)[0].split()
        lines.append([tuple(float(v) for v in c.split(",")) for c in coords])
    return lines
