"""Deterministic SVG rendering of hidden-state heatmaps and Bland-Altman plots.

Numbers are formatted with fixed precision so identical inputs give identical
bytes. Cells and reference lines carry ``data-*`` attributes with the values
they encode, which keeps the output checkable without parsing geometry.
"""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .errors import ParameterError
from .fileio import atomic_write_text

LOW_RGB = (247, 251, 255)
HIGH_RGB = (8, 48, 107)
MISSING_FILL = "#cccccc"
MEAN_DASH = "10 4 2 4"
LIMIT_DASH = "6 4"


def _f(x, digits=4):
    return f"{x:.{digits}f}"


def _color(frac):
    frac = min(max(frac, 0.0), 1.0)
    rgb = [round(lo + (hi - lo) * frac) for lo, hi in zip(LOW_RGB, HIGH_RGB)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def heatmap_svg(matrix, cell=10, row_height=40):
    """SVG text for a ``(2, T)`` heatmap: rows labelled "0" and "1", linear colour scale."""
    values = np.asarray(matrix.values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != 2:
        raise ParameterError(f"heatmap needs 2 rows, got shape {values.shape}")
    T = values.shape[1]
    finite = values[np.isfinite(values)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 0.0
    span = vmax - vmin
    left, top = 30, 20
    width = left + T * cell + 20
    legend_y = top + 2 * row_height + 20
    height = legend_y + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<g font-family="sans-serif" font-size="12">',
    ]
    for r in range(2):
        y = top + r * row_height
        out.append(f'<text x="{left - 6}" y="{y + row_height // 2 + 4}" text-anchor="end">{r}</text>')
        for t in range(T):
            v = values[r, t]
            if np.isfinite(v):
                fill = _color((v - vmin) / span) if span > 0 else _color(0.0)
                val = repr(float(v))
            else:
                fill, val = MISSING_FILL, "nan"
            out.append(
                f'<rect class="cell" data-row="{r}" data-step="{t}" data-value="{val}" '
                f'x="{left + t * cell}" y="{y}" width="{cell}" height="{row_height}" fill="{fill}"/>'
            )
    bar = T * cell
    out.append('<defs><linearGradient id="scale">'
               f'<stop offset="0" stop-color="{_color(0.0)}"/>'
               f'<stop offset="1" stop-color="{_color(1.0)}"/></linearGradient></defs>')
    out.append(f'<rect class="legend" x="{left}" y="{legend_y}" width="{bar}" height="10" fill="url(#scale)"/>')
    out.append(f'<text class="legend-min" data-value="{repr(vmin)}" x="{left}" y="{legend_y + 26}">'
               f'min {_f(vmin)}</text>')
    out.append(f'<text class="legend-max" data-value="{repr(vmax)}" x="{left + bar}" y="{legend_y + 26}" '
               f'text-anchor="end">max {_f(vmax)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_heatmap_svg(matrix, path):
    atomic_write_text(path, heatmap_svg(matrix))


def _nice_range(lo, hi):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ParameterError("plot range is not finite")
    if hi - lo <= 0:
        pad = max(abs(lo), 1.0) * 0.5
        return lo - pad, hi + pad
    pad = 0.08 * (hi - lo)
    return lo - pad, hi + pad


def bland_altman_svg(ba, width=480, height=360, title="Bland-Altman"):
    """SVG text: scatter of (mean, difference), dash-dot mean line, dashed 95% limits."""
    means = np.asarray(ba.means, dtype=np.float64)
    diffs = np.asarray(ba.diffs, dtype=np.float64)
    if means.shape != diffs.shape or means.size == 0:
        raise ParameterError("Bland-Altman data is empty or mismatched")
    x0, x1 = _nice_range(float(means.min()), float(means.max()))
    y_lo = min(float(diffs.min()), ba.lower)
    y_hi = max(float(diffs.max()), ba.upper)
    y0, y1 = _nice_range(y_lo, y_hi)
    ml, mr, mt, mb = 60, 90, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<g font-family="sans-serif" font-size="11">',
        f'<text x="{width // 2}" y="18" text-anchor="middle">{escape(title)}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>',
        f'<text x="{ml + pw // 2}" y="{height - 8}" text-anchor="middle">mean of pair</text>',
        f'<text x="14" y="{mt + ph // 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {mt + ph // 2})">difference</text>',
        f'<text x="{ml}" y="{mt + ph + 14}" text-anchor="middle">{_f(x0, 2)}</text>',
        f'<text x="{ml + pw}" y="{mt + ph + 14}" text-anchor="middle">{_f(x1, 2)}</text>',
    ]
    for m, d in zip(means, diffs):
        out.append(f'<circle class="point" cx="{_f(px(m))}" cy="{_f(py(d))}" r="2.5" fill="#1f4e79"/>')
    lines = [
        ("mean-line", ba.mean_diff, MEAN_DASH, "mean"),
        ("limit-line upper", ba.upper, LIMIT_DASH, "+1.96 SD"),
        ("limit-line lower", ba.lower, LIMIT_DASH, "-1.96 SD"),
    ]
    for cls, y, dash, label in lines:
        yy = _f(py(y))
        out.append(
            f'<line class="{cls}" data-y="{_f(y, 6)}" x1="{ml}" x2="{ml + pw}" y1="{yy}" y2="{yy}" '
            f'stroke="#b22222" stroke-dasharray="{dash}"/>'
        )
        out.append(f'<text x="{ml + pw + 4}" y="{yy}">{label} {_f(y)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_bland_altman_svg(ba, path, title="Bland-Altman"):
    atomic_write_text(path, bland_altman_svg(ba, title=title))
