"""Dependency-free SVG line charts for loss/accuracy histories."""

from __future__ import annotations

import math

PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
    "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2",
)

MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 24, 40, 48


def _bounds(series):
    xs, ys = [], []
    for pts in series.values():
        for x, y in pts:
            if not (math.isnan(x) or math.isnan(y)):
                xs.append(x)
                ys.append(y)
    if not xs:
        return 0.0, 1.0, 0.0, 1.0
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5
    return x0, x1, y0, y1


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 720, height: int = 440) -> str:
    """Render named (x, y) point lists as one SVG polyline per series."""
    x0, x1, y0, y1 = _bounds(series)
    pw = width - MARGIN_L - MARGIN_R
    ph = height - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="15">{title}</text>'
        )
    # axes
    parts.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
        f'y2="{MARGIN_T + ph}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T + ph}" x2="{MARGIN_L + pw}" '
        f'y2="{MARGIN_T + ph}" stroke="black"/>'
    )
    for t in _ticks(x0, x1):
        x = px(t)
        parts.append(f'<line x1="{x:.1f}" y1="{MARGIN_T + ph}" x2="{x:.1f}" '
                     f'y2="{MARGIN_T + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{MARGIN_T + ph + 18}" '
                     f'text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        y = py(t)
        parts.append(f'<line x1="{MARGIN_L - 5}" y1="{y:.1f}" x2="{MARGIN_L}" '
                     f'y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{MARGIN_L - 8}" y="{y + 4:.1f}" '
                     f'text-anchor="end">{t:.4g}</text>')
    if xlabel:
        parts.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{height - 10}" '
                     f'text-anchor="middle">{xlabel}</text>')
    if ylabel:
        parts.append(f'<text x="16" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" '
                     f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.1f})">{ylabel}</text>')

    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        clean = [(x, y) for x, y in pts if not (math.isnan(x) or math.isnan(y))]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in clean)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.6" '
                     f'points="{coords}"/>')
        ly = MARGIN_T + 14 * i + 4
        lx = MARGIN_L + pw - 150
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly + 4}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def history_chart(rows, value: str = "loss") -> str:
    """Chart search-history rows (phase, epoch, split, loss, acc) as one
    series per (phase, split)."""
    col = 3 if value == "loss" else 4
    series: dict[str, list] = {}
    for row in rows:
        phase, epoch, split_name = row[0], float(row[1]), row[2]
        y = float(row[col])
        series.setdefault(f"{phase}/{split_name}", []).append((epoch, y))
    return line_chart(series, title=value, xlabel="epoch", ylabel=value)
