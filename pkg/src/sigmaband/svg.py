"""Minimal self-contained SVG line and histogram plots for diagnostics."""

from __future__ import annotations

import os
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["svg_plot"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def svg_plot(path: str | os.PathLike, series: Sequence[dict], title: str = "",
             xlabel: str = "", ylabel: str = "", width: int = 640, height: int = 400) -> None:
    """Write a plot of several series.

    Each series is ``{"x": ..., "y": ..., "label": str, "kind": "line" | "step"}``;
    ``step`` series take bin edges as ``x`` (one more entry than ``y``).
    """
    left, right, top, bottom = 60, 20, 30, 45
    xs = np.concatenate([np.asarray(s["x"], float) for s in series])
    ys = np.concatenate([np.asarray(s["y"], float) for s in series])
    ys = ys[np.isfinite(ys)]
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = min(0.0, float(ys.min())), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (np.asarray(x, float) - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (np.asarray(y, float) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{_fmt(xv)}</text>')
        out.append(f'<text x="{left - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{_fmt(yv)}</text>')
    for i, s in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        x, y = np.asarray(s["x"], float), np.asarray(s["y"], float)
        if s.get("kind", "line") == "step":
            x = np.repeat(x, 2)[1:-1]
            y = np.repeat(y, 2)
        ok = np.isfinite(y)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(x[ok]), py(y[ok])))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        label = escape(str(s.get("label", "")))
        out.append(f'<text x="{left + pw - 5}" y="{top + 15 + 14 * i}" text-anchor="end" '
                   f'fill="{color}">{label}</text>')
    out.append(f'<text x="{width / 2}" y="18" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">{escape(ylabel)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
