"""Standalone SVG writers for the ROC curve and the score histogram.

Hand-assembled markup, no plotting library: identical inputs must produce
byte-identical files, and the output has to stand alone with no external
assets.
"""

from __future__ import annotations

import numpy as np

__all__ = ["roc_svg", "histogram_svg"]

_W = 480
_H = 420
_LEFT = 62
_RIGHT = 16
_TOP = 18
_BOTTOM = 52


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, x_label: str, y_label: str) -> list[str]:
    pw = _W - _LEFT - _RIGHT
    ph = _H - _TOP - _BOTTOM
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="12">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{_LEFT}" y="{_TOP}" width="{pw}" height="{ph}" fill="none" '
        f'stroke="black" stroke-width="1"/>',
        f'<text x="{_LEFT + pw / 2:.1f}" y="{_H - 12}" text-anchor="middle">{x_label}</text>',
        f'<text x="16" y="{_TOP + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {_TOP + ph / 2:.1f})">{y_label}</text>',
        f'<text x="{_LEFT + pw / 2:.1f}" y="{_TOP - 5}" text-anchor="middle">{title}</text>',
    ]


def roc_svg(points, auroc: float) -> str:
    """Polyline ROC plot over the unit square with 0..1 ticks."""
    pw = _W - _LEFT - _RIGHT
    ph = _H - _TOP - _BOTTOM

    def px(fpr: float) -> float:
        return _LEFT + fpr * pw

    def py(tpr: float) -> float:
        return _TOP + (1.0 - tpr) * ph

    parts = _frame(f"ROC (AUROC={auroc:.4f})", "FPR", "TPR")
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{px(tick):.1f}" y="{_H - _BOTTOM + 16}" '
                     f'text-anchor="middle">{_fmt(tick)}</text>')
        parts.append(f'<text x="{_LEFT - 6}" y="{py(tick) + 4:.1f}" '
                     f'text-anchor="end">{_fmt(tick)}</text>')
    parts.append(f'<line x1="{px(0):.1f}" y1="{py(0):.1f}" x2="{px(1):.1f}" y2="{py(1):.1f}" '
                 f'stroke="gray" stroke-dasharray="4 3" stroke-width="1"/>')
    coords = " ".join(f"{px(f):.2f},{py(t):.2f}" for f, t in points)
    parts.append(f'<polyline points="{coords}" fill="none" stroke="crimson" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def histogram_svg(edges, normal_counts, anomalous_counts) -> str:
    """Side-by-side per-class count bars over shared score bins.

    Every (bin, class) pair emits one bar rect even at zero height, so the
    file always holds exactly 2 * bins bars.
    """
    edges = np.asarray(edges, dtype=float)
    normal_counts = np.asarray(normal_counts)
    anomalous_counts = np.asarray(anomalous_counts)
    bins = len(edges) - 1
    pw = _W - _LEFT - _RIGHT
    ph = _H - _TOP - _BOTTOM
    top_count = max(int(normal_counts.max()), int(anomalous_counts.max()), 1)

    def bar_y(count: int) -> tuple[float, float]:
        h = ph * (count / top_count)
        return _TOP + ph - h, h

    parts = _frame("Anomaly score histogram", "score", "count")
    # legend
    parts.append(f'<rect x="{_LEFT + 8}" y="{_TOP + 8}" width="12" height="12" '
                 f'fill="steelblue"/>')
    parts.append(f'<text x="{_LEFT + 24}" y="{_TOP + 18}">normal</text>')
    parts.append(f'<rect x="{_LEFT + 98}" y="{_TOP + 8}" width="12" height="12" '
                 f'fill="firebrick"/>')
    parts.append(f'<text x="{_LEFT + 114}" y="{_TOP + 18}">anomalous</text>')
    # x ticks at the extremes and midpoint
    for frac in (0.0, 0.5, 1.0):
        v = edges[0] + frac * (edges[-1] - edges[0])
        parts.append(f'<text x="{_LEFT + frac * pw:.1f}" y="{_H - _BOTTOM + 16}" '
                     f'text-anchor="middle">{v:.3g}</text>')
    parts.append(f'<text x="{_LEFT - 6}" y="{_TOP + 4}" text-anchor="end">{top_count}</text>')
    parts.append(f'<text x="{_LEFT - 6}" y="{_TOP + ph + 4:.1f}" text-anchor="end">0</text>')

    slot = pw / bins
    bar_w = slot * 0.42
    for i in range(bins):
        x0 = _LEFT + i * slot
        y, h = bar_y(int(normal_counts[i]))
        parts.append(f'<rect x="{x0 + slot * 0.05:.2f}" y="{y:.2f}" width="{bar_w:.2f}" '
                     f'height="{h:.2f}" fill="steelblue"/>')
        y, h = bar_y(int(anomalous_counts[i]))
        parts.append(f'<rect x="{x0 + slot * 0.53:.2f}" y="{y:.2f}" width="{bar_w:.2f}" '
                     f'height="{h:.2f}" fill="firebrick"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
