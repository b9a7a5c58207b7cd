"""Minimal SVG line plots of metrics CSV columns."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .training import read_metrics_csv

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
PANEL_W, PANEL_H = 420, 260
MARGIN = 48


def _ticks(lo: float, hi: float) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / 4 for i in range(5)]


def _panel(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str, x0: float) -> list[str]:
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)]
    out = [f'<g transform="translate({x0:.1f},0)">',
           f'<text x="{PANEL_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']
    if not pts:
        out.append(f'<text x="{PANEL_W / 2:.1f}" y="{PANEL_H / 2:.1f}" text-anchor="middle">no data</text></g>')
        return out
    xmin, xmax = min(p[0] for p in pts), max(p[0] for p in pts)
    ymin, ymax = min(p[1] for p in pts), max(p[1] for p in pts)
    xspan, yspan = (xmax - xmin) or 1.0, (ymax - ymin) or 1.0
    left, right, top, bottom = MARGIN, PANEL_W - 10, 28, PANEL_H - 30

    def sx(x):
        return left + (x - xmin) / xspan * (right - left)

    def sy(y):
        return bottom - (y - ymin) / yspan * (bottom - top)

    out.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
               'fill="none" stroke="#999"/>')
    for t in _ticks(ymin, ymax):
        out.append(f'<text x="{left - 4}" y="{sy(t) + 4:.1f}" text-anchor="end" font-size="9">{t:.3g}</text>')
    for t in _ticks(xmin, xmax):
        out.append(f'<text x="{sx(t):.1f}" y="{bottom + 14}" text-anchor="middle" font-size="9">{t:.0f}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{right - 4}" y="{top + 14 + 12 * i}" text-anchor="end" font-size="10" '
                   f'fill="{color}">{escape(label)}</text>')
    out.append("</g>")
    return out


def svg_plot(panels: Mapping[str, Mapping[str, tuple[Sequence[float], Sequence[float]]]]) -> str:
    """One panel per entry of ``panels``; each panel maps a series label to (xs, ys)."""
    width = PANEL_W * max(1, len(panels))
    body = []
    for i, (title, series) in enumerate(panels.items()):
        body += _panel(series, title, i * PANEL_W)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" '
            f'font-family="sans-serif">\n' + "\n".join(body) + "\n</svg>\n")


def metric_series(path, column: str) -> tuple[list[float], list[float]]:
    rows = read_metrics_csv(path)
    if rows and column not in rows[0]:
        raise KeyError(f"column {column!r} not in {path}")
    pairs = [(r["step"], r[column]) for r in rows if r.get(column) is not None]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def plot_metrics(csv_paths: Mapping[str, str | Path], columns: Sequence[str]) -> str:
    """SVG with one panel per column and one line per labelled CSV."""
    return svg_plot({col: {label: metric_series(p, col) for label, p in csv_paths.items()} for col in columns})
