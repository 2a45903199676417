"""Standalone SVG line charts for metrics and sweep CSVs."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
METRIC_SERIES = ("loss", "loss_infonce", "loss_ressl", "loss_ceil")
SWEEP_SERIES = ("knn_acc", "probe_acc")


class PlotError(ValueError):
    pass


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * step:
        out.append(round(t, 12))
        t += step
    return out


def line_chart_svg(series: dict[str, tuple[list[float], list[float]]], title: str, xlabel: str,
                   ylabel: str, width: int = 640, height: int = 400) -> str:
    """Render named (x, y) series on shared axes. Non-finite points are skipped."""
    pts = {name: [(x, y) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
           for name, (xs, ys) in series.items()}
    pts = {k: v for k, v in pts.items() if v}
    if not pts:
        raise PlotError("nothing to plot: every series is empty or non-finite")
    xs = [x for v in pts.values() for x, _ in v]
    ys = [y for v in pts.values() for _, y in v]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for t in _ticks(x0, x1):
        parts.append(f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" y2="{top + ph + 4}" stroke="#444"/>')
        parts.append(f'<text x="{sx(t):.2f}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        parts.append(f'<line x1="{left - 4}" y1="{sy(t):.2f}" x2="{left}" y2="{sy(t):.2f}" stroke="#444"/>')
        parts.append(f'<line x1="{left}" y1="{sy(t):.2f}" x2="{left + pw}" y2="{sy(t):.2f}" stroke="#eee"/>')
        parts.append(f'<text x="{left - 6}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:g}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {top + ph / 2})">{escape(ylabel)}</text>')
    for i, (name, v) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in v)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = top + 14 + 18 * i
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_csv(csv_path, svg_path) -> None:
    """Plot a metrics CSV (losses against step) or a sweep CSV (accuracies against value)."""
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotError(f"{csv_path}: no data rows")
    header = rows[0].keys()
    if "step" in header:
        xs = [float(r["step"]) for r in rows]
        series = {k: (xs, [float(r[k]) for r in rows]) for k in METRIC_SERIES if k in header}
        svg = line_chart_svg(series, "Training losses", "step", "loss")
    elif "knn_acc" in header:
        try:
            xs = [float(r["value"]) for r in rows]
        except ValueError:
            xs = list(range(len(rows)))  # categorical values such as augmentation pairs
        series = {k: (xs, [float(r[k]) for r in rows]) for k in SWEEP_SERIES}
        svg = line_chart_svg(series, "Sweep accuracy", "value", "accuracy")
    else:
        raise PlotError(f"{csv_path}: neither a metrics nor a sweep CSV")
    Path(svg_path).write_text(svg, encoding="utf-8")
