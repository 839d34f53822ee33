"""Hand-rolled SVG output.

Byte-identical plots for identical inputs are part of the reproducibility
contract, so this stays a tiny fixed-format writer rather than a plotting
library with embedded timestamps.
"""

from __future__ import annotations

from pathlib import Path

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def _document(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" '
            f'height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _polyline(points, color, width=1.5, dash=None):
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{_fmt(width)}"'
            f'{dash_attr} points="{pts}"/>')


def _text(x, y, s, size=11, anchor="start"):
    return (f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-family="sans-serif" '
            f'font-size="{size}" text-anchor="{anchor}">{s}</text>')


def _rect(x, y, w, h, color):
    return (f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
            f'fill="{color}"/>')


def trajectory_overlay(pairs: list[tuple], path: str | Path,
                       width: float = 480.0, height: float = 360.0) -> Path:
    """Overlay of (truth_points, predicted_points) pairs, each (N, 2) in meters.

    Truth is drawn solid, predictions dashed, one color per pair.
    """
    margin = 40.0
    allpts = [p for pair in pairs for p in pair]
    if not allpts:
        raise ValueError("nothing to plot")
    import numpy as np
    stacked = np.vstack([np.asarray(p).reshape(-1, 2) for p in allpts])
    lo = stacked.min(axis=0) - 1.0
    hi = stacked.max(axis=0) + 1.0
    span = np.maximum(hi - lo, 1e-6)

    def to_px(pt):
        x = margin + (pt[0] - lo[0]) / span[0] * (width - 2 * margin)
        y = height - margin - (pt[1] - lo[1]) / span[1] * (height - 2 * margin)
        return x, y

    body = [_text(width / 2, 16, "trajectories: truth (solid) vs prediction (dashed)",
                  anchor="middle"),
            _text(width / 2, height - 6, "longitudinal (m)", anchor="middle"),
            _text(12, height / 2, "lateral (m)", anchor="middle")]
    for i, (truth, pred) in enumerate(pairs):
        color = _PALETTE[i % len(_PALETTE)]
        body.append(_polyline([to_px(p) for p in np.asarray(truth)], color))
        body.append(_polyline([to_px(p) for p in np.asarray(pred)], color, dash="4,3"))
    out = Path(path)
    out.write_text(_document(width, height, body))
    return out


def grouped_bars(labels: list[str], groups: dict[str, list[float]], path: str | Path,
                 title: str = "", width: float = 560.0, height: float = 360.0) -> Path:
    """Grouped bar chart: one cluster per label, one bar per group key."""
    margin = 50.0
    keys = list(groups)
    if not labels or not keys:
        raise ValueError("nothing to plot")
    peak = max(max(vs) for vs in groups.values() if vs) or 1.0
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    cluster_w = plot_w / len(labels)
    bar_w = cluster_w * 0.8 / len(keys)

    body = [_text(width / 2, 20, title, anchor="middle")]
    for j, key in enumerate(keys):
        color = _PALETTE[j % len(_PALETTE)]
        body.append(_rect(margin + 12 + 90 * j, 28, 10, 10, color))
        body.append(_text(margin + 26 + 90 * j, 37, key))
    for i, label in enumerate(labels):
        x0 = margin + i * cluster_w + cluster_w * 0.1
        for j, key in enumerate(keys):
            v = groups[key][i]
            h = 0.0 if peak == 0 else v / peak * (plot_h - 30)
            x = x0 + j * bar_w
            y = height - margin - h
            body.append(_rect(x, y, bar_w * 0.92, h, _PALETTE[j % len(_PALETTE)]))
            body.append(_text(x + bar_w * 0.45, y - 3, _fmt(v), size=9, anchor="middle"))
        body.append(_text(x0 + cluster_w * 0.4, height - margin + 14, label,
                          size=9, anchor="middle"))
    body.append(_polyline([(margin, height - margin), (width - margin, height - margin)],
                          "#000000", width=1.0))
    out = Path(path)
    out.write_text(_document(width, height, body))
    return out
