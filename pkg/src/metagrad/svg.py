"""Minimal deterministic SVG line charts (no plotting dependency).

Coordinates are printed with fixed precision so identical inputs give
identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["Series", "line_chart"]

WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 80, 170, 40, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
          "#7f7f7f", "#bcbd22", "#17becf")


@dataclass(frozen=True)
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.0e}".replace("e+0", "e").replace("e-0", "e-")
    return f"{v:.4g}"


def _linear_ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    step = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if raw <= m * step:
            step *= m
            break
    start = math.ceil(lo / step - 1e-9) * step
    ticks, v = [], start
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


class _Axis:
    def __init__(self, values, log, lo_px, hi_px):
        vals = np.asarray(values, dtype=np.float64)
        self.log = log
        t = np.log10(vals) if log else vals
        lo, hi = float(t.min()), float(t.max())
        if log:
            lo, hi = math.floor(lo), math.ceil(hi)
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.lo, self.hi, self.lo_px, self.hi_px = lo, hi, lo_px, hi_px

    def __call__(self, v):
        t = math.log10(v) if self.log else v
        return self.lo_px + (t - self.lo) / (self.hi - self.lo) * (self.hi_px - self.lo_px)

    def ticks(self):
        if self.log:
            return [10.0 ** e for e in range(int(self.lo), int(self.hi) + 1)]
        return _linear_ticks(self.lo, self.hi)


def line_chart(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
               logx: bool = False, logy: bool = False) -> str:
    """Render one polyline per series; points that cannot go on a log axis are dropped."""
    cleaned = []
    for s in series:
        pts = [(float(a), float(b)) for a, b in zip(s.x, s.y)
               if np.isfinite(a) and np.isfinite(b) and (not logx or a > 0) and (not logy or b > 0)]
        if pts:
            cleaned.append((s.label, sorted(pts)))
    if not cleaned:
        raise ValueError("no data points to plot")
    xs = [p[0] for _, pts in cleaned for p in pts]
    ys = [p[1] for _, pts in cleaned for p in pts]
    ax = _Axis(xs, logx, LEFT, WIDTH - RIGHT)
    ay = _Axis(ys, logy, HEIGHT - BOTTOM, TOP)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{(LEFT + WIDTH - RIGHT) / 2:.1f}" y="22" text-anchor="middle" '
           f'font-size="14">{escape(title)}</text>']
    x0, x1, y0, y1 = LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP
    out.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
               f'fill="none" stroke="black"/>')
    for t in ax.ticks():
        px = _fmt(ax(t))
        out.append(f'<line x1="{px}" y1="{y0}" x2="{px}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{px}" y="{y0 + 18}" text-anchor="middle">{_tick_label(t)}</text>')
    for t in ay.ticks():
        py = _fmt(ay(t))
        out.append(f'<line x1="{x0 - 5}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{py}" text-anchor="end" '
                   f'dominant-baseline="middle">{_tick_label(t)}</text>')
    xl = escape(xlabel + (" (log)" if logx else ""))
    yl = escape(ylabel + (" (log)" if logy else ""))
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">{xl}</text>')
    out.append(f'<text x="18" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {(y0 + y1) / 2:.1f})">{yl}</text>')
    for i, (label, pts) in enumerate(cleaned):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{_fmt(ax(a))},{_fmt(ay(b))}" for a, b in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = TOP + 10 + 18 * i
        out.append(f'<line x1="{x1 + 12}" y1="{ly}" x2="{x1 + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 38}" y="{ly}" dominant-baseline="middle">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
