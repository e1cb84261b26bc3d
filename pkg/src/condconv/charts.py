"""Minimal standalone SVG charts (bar, histogram, line). No plotting deps."""

from __future__ import annotations

from typing import Optional, Sequence

__all__ = ["bar_chart_svg", "histogram_svg", "line_chart_svg"]

_W, _H = 640, 360
_MARGIN = 48


def _frame(title: str, body: str) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">\n'
        f'<rect width="{_W}" height="{_H}" fill="white"/>\n'
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>\n'
        f"{body}\n</svg>\n"
    )


def _axis(max_value: float) -> str:
    x0, y0, y1 = _MARGIN, _H - _MARGIN, _MARGIN
    return (
        f'<line x1="{x0}" y1="{y0}" x2="{_W - _MARGIN}" y2="{y0}" stroke="black"/>\n'
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>\n'
        f'<text x="{x0 - 6}" y="{y1 + 4}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{max_value:g}</text>\n'
        f'<text x="{x0 - 6}" y="{y0 + 4}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">0</text>'
    )


def bar_chart_svg(
    values: Sequence[float],
    labels: Optional[Sequence[str]] = None,
    title: str = "",
) -> str:
    values = [float(v) for v in values]
    top = max(max(values, default=0.0), 1e-12)
    plot_w = _W - 2 * _MARGIN
    plot_h = _H - 2 * _MARGIN
    slot = plot_w / max(1, len(values))
    bar_w = slot * 0.8
    parts = [_axis(top)]
    for i, v in enumerate(values):
        h = plot_h * v / top
        x = _MARGIN + i * slot + (slot - bar_w) / 2
        y = _H - _MARGIN - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{h:.2f}" '
            f'fill="#4878a8"/>'
        )
        if labels is not None and len(values) <= 40:
            parts.append(
                f'<text x="{x + bar_w / 2:.2f}" y="{_H - _MARGIN + 14}" '
                f'text-anchor="middle" font-size="9" font-family="sans-serif">'
                f"{labels[i]}</text>"
            )
    return _frame(title, "\n".join(parts))


def histogram_svg(counts: Sequence[int], lo: float = 0.0, hi: float = 1.0,
                  title: str = "") -> str:
    labels = None
    if len(counts) <= 40:
        edges = [lo + (hi - lo) * i / len(counts) for i in range(len(counts) + 1)]
        labels = [f"{edges[i]:.2f}" for i in range(len(counts))]
    return bar_chart_svg(list(counts), labels, title)


def line_chart_svg(
    xs: Sequence[float], ys: Sequence[float], title: str = ""
) -> str:
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    if len(xs) != len(ys) or not xs:
        raise ValueError("line chart needs matching non-empty x and y")
    top = max(max(ys), 1e-12)
    x_lo, x_hi = min(xs), max(xs)
    span = (x_hi - x_lo) or 1.0
    plot_w = _W - 2 * _MARGIN
    plot_h = _H - 2 * _MARGIN
    pts = []
    for x, y in zip(xs, ys):
        px = _MARGIN + plot_w * (x - x_lo) / span
        py = _H - _MARGIN - plot_h * y / top
        pts.append(f"{px:.2f},{py:.2f}")
    body = (
        _axis(top)
        + f'\n<polyline points="{" ".join(pts)}" fill="none" stroke="#a84848" '
        f'stroke-width="2"/>'
    )
    for p in pts:
        px, py = p.split(",")
        body += f'\n<circle cx="{px}" cy="{py}" r="3" fill="#a84848"/>'
    return _frame(title, body)
