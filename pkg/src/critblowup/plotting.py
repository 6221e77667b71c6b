"""Minimal deterministic SVG line charts with optional log axes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray


def _transform(v: np.ndarray, log: bool) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if log:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(v > 0, np.log10(np.where(v > 0, v, 1.0)), np.nan)
    return v


def _ticks(lo: float, hi: float, log: bool, count: int = 5) -> list[tuple[float, str]]:
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, int(math.ceil((b - a) / count)))
        return [(float(e), f"1e{e}") for e in range(a, b + 1, step) if lo - 1e-9 <= e <= hi + 1e-9]
    vals = np.linspace(lo, hi, count)
    return [(float(v), f"{v:.3g}") for v in vals]


def line_chart(
    series: list[Series],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    xlog: bool = False,
    ylog: bool = False,
    width: int = 640,
    height: int = 420,
) -> str:
    """Render series as polylines; non-finite or non-positive (on log axes) points are skipped."""
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [_transform(s.x, xlog) for s in series]
    ys = [_transform(s.y, ylog) for s in series]
    finite_x = np.concatenate([x[np.isfinite(x) & np.isfinite(y)] for x, y in zip(xs, ys)] or [np.zeros(0)])
    finite_y = np.concatenate([y[np.isfinite(x) & np.isfinite(y)] for x, y in zip(xs, ys)] or [np.zeros(0)])
    if finite_x.size == 0:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    else:
        x0, x1 = float(finite_x.min()), float(finite_x.max())
        y0, y1 = float(finite_y.min()), float(finite_y.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for v, lab in _ticks(x0, x1, xlog):
        out.append(f'<line x1="{px(v):.2f}" y1="{top + ph}" x2="{px(v):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(v):.2f}" y="{top + ph + 18}" text-anchor="middle" font-size="11">{escape(lab)}</text>')
    for v, lab in _ticks(y0, y1, ylog):
        out.append(f'<line x1="{left - 5}" y1="{py(v):.2f}" x2="{left}" y2="{py(v):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(v) + 4:.2f}" text-anchor="end" font-size="11">{escape(lab)}</text>')
    for i, (s, x, y) in enumerate(zip(series, xs, ys)):
        color = PALETTE[i % len(PALETTE)]
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], y[ok]))
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 16 + 16 * i
        out.append(f'<line x1="{left + pw - 150}" y1="{ly - 4}" x2="{left + pw - 130}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 125}" y="{ly}" font-size="11">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
