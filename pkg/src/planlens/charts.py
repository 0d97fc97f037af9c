"""Standalone SVG line charts.

Charts are written directly as SVG text so that re-running with the same
inputs produces byte-identical files (no renderer metadata, no
timestamps).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

WIDTH = 640
HEIGHT = 400
MARGIN_LEFT = 70
MARGIN_RIGHT = 20
MARGIN_TOP = 30
MARGIN_BOTTOM = 50


@dataclass
class Series:
    name: str
    xs: Sequence[float]
    ys: Sequence[float]
    dashed: bool = False


@dataclass
class LineChart:
    title: str
    x_label: str
    y_label: str
    series: list[Series] = field(default_factory=list)
    clip: float | None = None  # clamp y values for display only
    meta: str | None = None  # provenance comment embedded in the SVG

    def add(self, name: str, xs: Sequence[float], ys: Sequence[float], dashed: bool = False) -> None:
        self.series.append(Series(name, list(xs), list(ys), dashed))

    def render(self) -> str:
        plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
        plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
        ys_all: list[float] = []
        xs_all: list[float] = []
        for s in self.series:
            xs_all.extend(s.xs)
            ys_all.extend(self._clipped(s.ys))
        if not xs_all:
            xs_all = [0.0, 1.0]
            ys_all = [0.0, 1.0]
        x_min, x_max = min(xs_all), max(xs_all)
        y_min, y_max = min(ys_all), max(ys_all)
        if x_max == x_min:
            x_max = x_min + 1.0
        if y_max == y_min:
            y_max = y_min + 1.0
        y_pad = 0.05 * (y_max - y_min)
        y_min -= y_pad
        y_max += y_pad

        def sx(x: float) -> float:
            return MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w

        def sy(y: float) -> float:
            return MARGIN_TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        ]
        if self.meta:
            parts.append(f"<!-- {_esc(self.meta)} -->")
        parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        parts.append(
            f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{_esc(self.title)}</text>'
        )
        axis_y = MARGIN_TOP + plot_h
        parts.append(
            f'<line x1="{MARGIN_LEFT}" y1="{axis_y}" x2="{MARGIN_LEFT + plot_w}" '
            f'y2="{axis_y}" stroke="black"/>'
        )
        parts.append(
            f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" '
            f'y2="{axis_y}" stroke="black"/>'
        )
        for i in range(5):
            frac = i / 4
            x_val = x_min + frac * (x_max - x_min)
            y_val = y_min + frac * (y_max - y_min)
            gx = MARGIN_LEFT + frac * plot_w
            gy = MARGIN_TOP + (1 - frac) * plot_h
            parts.append(
                f'<text x="{gx:.1f}" y="{axis_y + 16}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10">{_fmt(x_val)}</text>'
            )
            parts.append(
                f'<text x="{MARGIN_LEFT - 6}" y="{gy + 3:.1f}" text-anchor="end" '
                f'font-family="sans-serif" font-size="10">{_fmt(y_val)}</text>'
            )
            if i > 0:
                parts.append(
                    f'<line x1="{MARGIN_LEFT}" y1="{gy:.1f}" '
                    f'x2="{MARGIN_LEFT + plot_w}" y2="{gy:.1f}" '
                    f'stroke="#dddddd" stroke-width="0.5"/>'
                )
        parts.append(
            f'<text x="{MARGIN_LEFT + plot_w / 2:.1f}" y="{HEIGHT - 12}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="12">'
            f"{_esc(self.x_label)}</text>"
        )
        parts.append(
            f'<text x="16" y="{MARGIN_TOP + plot_h / 2:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {MARGIN_TOP + plot_h / 2:.1f})">'
            f"{_esc(self.y_label)}</text>"
        )
        for idx, s in enumerate(self.series):
            color = _PALETTE[idx % len(_PALETTE)]
            ys = self._clipped(s.ys)
            points = " ".join(
                f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(s.xs, ys)
            )
            dash = ' stroke-dasharray="6,4"' if s.dashed else ""
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.8"'
                f'{dash} points="{points}"/>'
            )
            ly = MARGIN_TOP + 14 + 14 * idx
            lx = MARGIN_LEFT + plot_w - 150
            parts.append(
                f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
                f'stroke="{color}" stroke-width="1.8"{dash}/>'
            )
            parts.append(
                f'<text x="{lx + 28}" y="{ly}" font-family="sans-serif" '
                f'font-size="11">{_esc(s.name)}</text>'
            )
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def _clipped(self, ys: Sequence[float]) -> list[float]:
        if self.clip is None:
            return list(ys)
        limit = abs(self.clip)
        return [min(max(y, -limit), limit) for y in ys]


def _esc(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
    )


def _fmt(value: float) -> str:
    if abs(value) >= 1000 or value == int(value):
        return f"{value:.0f}"
    return f"{value:.3g}"
