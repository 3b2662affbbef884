"""Minimal deterministic SVG line charts, no plotting dependency.

Coordinates are formatted with fixed precision so a chart regenerated from the
same data is byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
    "#aec7e8", "#ffbb78",
)

WIDTH, HEIGHT = 720, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 180, 40, 56


@dataclass(frozen=True)
class Series:
    name: str
    xs: tuple[float, ...]
    ys: tuple[float, ...]
    err: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.xs) != len(self.ys) or (self.err and len(self.err) != len(self.xs)):
            raise ValueError(f"series {self.name!r} has unaligned columns")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_chart(
    title: str,
    x_label: str,
    y_label: str,
    series: list[Series],
    log_x: bool = True,
    y_range: tuple[float, float] = (0.0, 1.0),
) -> str:
    """Polyline chart with optional ±err whiskers; x ticks at the data points."""
    if not series or not series[0].xs:
        raise ValueError("nothing to plot")
    xs_all = sorted({x for s in series for x in s.xs})
    to_axis = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    x_lo, x_hi = to_axis(xs_all[0]), to_axis(xs_all[-1])
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = 0.06 * (x_hi - x_lo)
    x_lo, x_hi = x_lo - pad, x_hi + pad
    y_lo, y_hi = y_range

    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(v: float) -> float:
        return MARGIN_L + (to_axis(v) - x_lo) / (x_hi - x_lo) * plot_w

    def py(v: float) -> float:
        return MARGIN_T + (y_hi - v) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="22" text-anchor="middle" font-size="15">{title}</text>',
    ]
    # Axes and grid.
    y_ticks = 6
    for i in range(y_ticks):
        v = y_lo + (y_hi - y_lo) * i / (y_ticks - 1)
        y = py(v)
        parts.append(
            f'<line x1="{MARGIN_L}" y1="{_fmt(y)}" x2="{WIDTH - MARGIN_R}" '
            f'y2="{_fmt(y)}" stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{_fmt(y + 4)}" text-anchor="end" '
            f'font-size="11">{v:.1f}</text>'
        )
    for x in xs_all:
        xp = px(x)
        parts.append(
            f'<line x1="{_fmt(xp)}" y1="{MARGIN_T}" x2="{_fmt(xp)}" '
            f'y2="{HEIGHT - MARGIN_B}" stroke="#eeeeee"/>'
        )
        parts.append(
            f'<text x="{_fmt(xp)}" y="{HEIGHT - MARGIN_B + 18}" text-anchor="middle" '
            f'font-size="11">{x:.1f}</text>'
        )
    parts.append(
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#333333"/>'
    )
    parts.append(
        f'<text x="{MARGIN_L + plot_w / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-size="12">{x_label}</text>'
    )
    parts.append(
        f'<text x="18" y="{MARGIN_T + plot_h / 2:.0f}" text-anchor="middle" '
        f'font-size="12" transform="rotate(-90 18 {MARGIN_T + plot_h / 2:.0f})">{y_label}</text>'
    )
    # Series.
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(s.xs, s.ys))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.8"/>'
        )
        for j, (x, y) in enumerate(zip(s.xs, s.ys)):
            parts.append(
                f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>'
            )
            if s.err:
                lo, hi = py(y - s.err[j]), py(y + s.err[j])
                parts.append(
                    f'<line x1="{_fmt(px(x))}" y1="{_fmt(lo)}" x2="{_fmt(px(x))}" '
                    f'y2="{_fmt(hi)}" stroke="{color}" stroke-width="1"/>'
                )
        ly = MARGIN_T + 16 * i
        lx = WIDTH - MARGIN_R + 12
        parts.append(
            f'<line x1="{lx}" y1="{ly + 6}" x2="{lx + 20}" y2="{ly + 6}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 26}" y="{ly + 10}" font-size="11">{s.name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
