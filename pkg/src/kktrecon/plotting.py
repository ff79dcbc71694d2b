"""Deterministic SVG scatter plots of reconstruction score against margin."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .evaluator import read_scatter_csv

WIDTH, HEIGHT = 480, 360
PAD_L, PAD_R, PAD_T, PAD_B = 56, 16, 28, 44
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _range(values, lo_default, hi_default):
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return lo_default, hi_default
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def scatter_svg(rows, threshold: float = 0.4, title: str = "", ylabel: str = "SSIM",
                xlabel: str = "distance from decision boundary") -> str:
    """Render ``(margin, score, label, index)`` rows.

    Draws a dashed horizontal line at ``threshold`` and annotates how many
    points lie strictly above it.
    """
    xs = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    x_lo, x_hi = _range(xs, 0.0, 1.0)
    y_lo, y_hi = _range(ys + [threshold], 0.0, 1.0)
    pw, ph = WIDTH - PAD_L - PAD_R, HEIGHT - PAD_T - PAD_B

    def px(x):
        return PAD_L + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return PAD_T + (1 - (y - y_lo) / (y_hi - y_lo)) * ph

    good = sum(1 for y in ys if y > threshold)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<g id="axes" stroke="black" fill="none">'
        f'<line x1="{PAD_L}" y1="{PAD_T + ph}" x2="{PAD_L + pw}" y2="{PAD_T + ph}"/>'
        f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{PAD_T + ph}"/></g>',
    ]
    ticks = []
    for k in range(5):
        xv = x_lo + (x_hi - x_lo) * k / 4
        yv = y_lo + (y_hi - y_lo) * k / 4
        ticks.append(f'<text x="{px(xv):.2f}" y="{PAD_T + ph + 14}" text-anchor="middle">{_fmt(xv)}</text>')
        ticks.append(f'<text x="{PAD_L - 4}" y="{py(yv) + 4:.2f}" text-anchor="end">{_fmt(yv)}</text>')
    out.append('<g id="ticks">' + "".join(ticks) + "</g>")
    out.append(f'<text x="{PAD_L + pw / 2:.2f}" y="{HEIGHT - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{PAD_T + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {PAD_T + ph / 2:.2f})">{escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="16" text-anchor="middle">{escape(title)}</text>')
    ty = py(threshold)
    out.append(f'<line id="threshold" x1="{PAD_L}" y1="{ty:.2f}" x2="{PAD_L + pw}" y2="{ty:.2f}" '
               f'stroke="gray" stroke-dasharray="4 3" data-value="{threshold!r}"/>')
    out.append(f'<text id="good-count" x="{PAD_L + pw - 4}" y="{ty - 4:.2f}" text-anchor="end">'
               f'{good} above {_fmt(threshold)}</text>')
    marks = []
    for x, y, label, idx in rows:
        if not (math.isfinite(x) and math.isfinite(y)):
            continue
        color = PALETTE[int(label) % len(PALETTE)]
        marks.append(f'<circle class="pt" cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" fill="{color}" '
                     f'data-index="{int(idx)}"/>')
    out.append('<g id="points">' + "".join(marks) + "</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(scatter_csv_text: str, threshold: float = 0.4, title: str = "", ylabel: str = "SSIM") -> str:
    """Parse a scatter CSV and render it; raises ``ValueError`` on a bad header."""
    return scatter_svg(read_scatter_csv(scatter_csv_text), threshold, title, ylabel)
