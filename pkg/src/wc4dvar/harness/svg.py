"""Deterministic SVG histograms built from rect/line/text primitives."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _f(x: float) -> str:
    return f"{x:.2f}"


def histogram_svg(values, markers: dict[str, float], title: str, bins: int = 40, width: int = 640,
                  height: int = 400, note: str = "") -> str:
    """Histogram of ``values`` with a labelled vertical line per marker."""
    values = np.asarray(values, dtype=float)
    lo = min([values.min()] + list(markers.values()))
    hi = max([values.max()] + list(markers.values()))
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.02 * (hi - lo)
    edges = np.linspace(lo - pad, hi + pad, bins + 1)
    counts, _ = np.histogram(values, edges)
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    cmax = max(int(counts.max()), 1)

    def sx(v):
        return left + (v - edges[0]) / (edges[-1] - edges[0]) * pw

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<desc>{escape(note)}</desc>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" font-size="15" text-anchor="middle" '
        f'font-family="sans-serif">{escape(title)}</text>',
    ]
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        if c == 0:
            continue
        h = c / cmax * ph
        out.append(f'<rect x="{_f(sx(a))}" y="{_f(top + ph - h)}" width="{_f(sx(b) - sx(a))}" '
                   f'height="{_f(h)}" fill="#bbbbbb" stroke="#777777" stroke-width="0.5"/>')
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>')
    for t in np.linspace(edges[0], edges[-1], 5):
        out.append(f'<text x="{_f(sx(t))}" y="{top + ph + 18}" font-size="11" text-anchor="middle" '
                   f'font-family="sans-serif">{t:.4g}</text>')
    out.append(f'<text x="{left - 6}" y="{top + 4}" font-size="11" text-anchor="end" '
               f'font-family="sans-serif">{cmax}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" font-size="12" text-anchor="middle" '
               f'font-family="sans-serif">criterion value</text>')
    for i, (name, v) in enumerate(markers.items()):
        color = _COLORS[i % len(_COLORS)]
        x = _f(sx(v))
        out.append(f'<line x1="{x}" y1="{top}" x2="{x}" y2="{top + ph}" stroke="{color}" '
                   f'stroke-width="2" stroke-dasharray="6,3"/>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 + 14 * i}" font-size="12" text-anchor="end" '
                   f'fill="{color}" font-family="sans-serif">{escape(name)} = {v:.4g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
