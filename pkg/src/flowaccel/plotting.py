"""Minimal SVG output: heatmaps and line plots, written as plain text."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _color(u: float) -> str:
    """Light yellow (u=0) to dark blue (u=1)."""
    lo, hi = np.array([255, 247, 188]), np.array([37, 52, 148])
    c = np.rint(lo + (hi - lo) * min(max(u, 0.0), 1.0)).astype(int)
    return "#%02x%02x%02x" % tuple(c)


def heatmap_svg(labels, values, title: str = "", cell: int = 56) -> str:
    values = np.asarray(values, dtype=float)
    n = len(labels)
    margin = 130
    width = margin + n * cell + 20
    height = margin + n * cell + 20
    finite = values[np.isfinite(values)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 1.0
    span = vmax - vmin or 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">']
    if title:
        out.append(f'<text x="10" y="18" font-size="13">{escape(title)}</text>')
    for i, lab in enumerate(labels):
        y = margin + i * cell + cell / 2
        x = margin + i * cell + cell / 2
        out.append(f'<text x="{margin - 6}" y="{_fmt(y)}" text-anchor="end" dominant-baseline="middle">{escape(lab)}</text>')
        out.append(f'<text x="{_fmt(x)}" y="{margin - 6}" text-anchor="start" '
                   f'transform="rotate(-45 {_fmt(x)} {margin - 6})">{escape(lab)}</text>')
    for i in range(n):
        for j in range(n):
            v = values[i, j]
            x, y = margin + j * cell, margin + i * cell
            fill = "#dddddd" if not math.isfinite(v) else _color((v - vmin) / span)
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/>')
            text = "n/a" if not math.isfinite(v) else f"{v:.3g}"
            ink = "white" if math.isfinite(v) and (v - vmin) / span > 0.55 else "black"
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2}" text-anchor="middle" '
                       f'dominant-baseline="middle" fill="{ink}">{text}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_plot_svg(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
                  width: int = 480, height: int = 320) -> str:
    """``series`` maps a label to an (x, y) pair of arrays."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pad = 50
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
           f'fill="none" stroke="#444"/>']
    if title:
        out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{height / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {height / 2})">{escape(ylabel)}</text>')
    for val, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{_fmt(px(val))}" y="{height - pad + 14}" text-anchor="{anchor}">{val:.3g}</text>')
    for val in (y0, y1):
        out.append(f'<text x="{pad - 4}" y="{_fmt(py(val))}" text-anchor="end">{val:.3g}</text>')
    for k, (label, (x, y)) in enumerate(series.items()):
        color = palette[k % len(palette)]
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - pad + 4 - 120}" y="{pad + 14 + 14 * k}" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
