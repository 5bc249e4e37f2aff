"""Minimal SVG charts for CLI diagnostics (no plotting library needed)."""

from __future__ import annotations

import math
from typing import Callable, Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=50)
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return []
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= n:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step) + 1)]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


class _Frame:
    def __init__(self, xlim, ylim, title, xlabel, ylabel):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 16 {HEIGHT / 2})">'
            f"{escape(ylabel)}</text>",
        ]
        self._axes()

    def px(self, x):
        w = WIDTH - MARGIN["left"] - MARGIN["right"]
        return MARGIN["left"] + (np.asarray(x, dtype=float) - self.x0) / (self.x1 - self.x0) * w

    def py(self, y):
        h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        return HEIGHT - MARGIN["bottom"] - (np.asarray(y, dtype=float) - self.y0) / (self.y1 - self.y0) * h

    def _axes(self):
        left, bottom = MARGIN["left"], HEIGHT - MARGIN["bottom"]
        right, top = WIDTH - MARGIN["right"], MARGIN["top"]
        self.parts.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
                          'fill="none" stroke="#444"/>')
        for t in _ticks(self.x0, self.x1):
            x = float(self.px(t))
            self.parts.append(f'<line x1="{x:.1f}" y1="{bottom}" x2="{x:.1f}" y2="{bottom + 5}" stroke="#444"/>')
            self.parts.append(f'<text x="{x:.1f}" y="{bottom + 18}" text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(self.y0, self.y1):
            y = float(self.py(t))
            self.parts.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="#444"/>')
            self.parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')

    def polyline(self, x, y, color, dashed=False):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(self.px(x), self.py(y)) if math.isfinite(b))
        dash = ' stroke-dasharray="5,4"' if dashed else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')

    def legend(self, names):
        for i, name in enumerate(names):
            y = MARGIN["top"] + 14 + 16 * i
            x = WIDTH - MARGIN["right"] - 150
            c = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 18}" y2="{y - 4}" stroke="{c}" stroke-width="2"/>')
            self.parts.append(f'<text x="{x + 24}" y="{y}">{escape(name)}</text>')

    def svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], filename, *, title="",
               xlabel="", ylabel="", logy=False) -> None:
    """One polyline per named series; ``logy`` plots ``log10(y)`` for positive values."""
    data = {}
    for name, (x, y) in series.items():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if logy:
            with np.errstate(divide="ignore", invalid="ignore"):
                y = np.where(y > 0, np.log10(y), np.nan)
        data[name] = (x, y)
    xs = np.concatenate([d[0] for d in data.values()])
    ys = np.concatenate([d[1] for d in data.values()])
    ys = ys[np.isfinite(ys)]
    ylim = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    fr = _Frame((float(xs.min()), float(xs.max())), ylim, title, xlabel,
                f"log10 {ylabel}" if logy else ylabel)
    for i, (name, (x, y)) in enumerate(data.items()):
        fr.polyline(x, y, PALETTE[i % len(PALETTE)], dashed=name.startswith("target"))
    fr.legend(list(data))
    with open(filename, "w") as fh:
        fh.write(fr.svg())


def histogram(values: Sequence[float], filename, *, bins: int = 30, title="", xlabel="",
              density: Callable[[np.ndarray], np.ndarray] | None = None) -> None:
    """Normalized histogram, optionally overlaid with a reference density."""
    v = np.asarray(values, dtype=float)
    counts, edges = np.histogram(v, bins=bins, density=True)
    top = float(counts.max()) if counts.size else 1.0
    grid = np.linspace(edges[0], edges[-1], 200)
    ref = density(grid) if density is not None else None
    if ref is not None:
        top = max(top, float(np.max(ref)))
    fr = _Frame((float(edges[0]), float(edges[-1])), (0.0, top * 1.05), title, xlabel, "density")
    base = float(fr.py(0.0))
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        x0, x1 = float(fr.px(a)), float(fr.px(b))
        y = float(fr.py(c))
        fr.parts.append(f'<rect x="{x0:.2f}" y="{y:.2f}" width="{max(x1 - x0 - 1, 0.5):.2f}" '
                        f'height="{base - y:.2f}" fill="{PALETTE[0]}" fill-opacity="0.6"/>')
    if ref is not None:
        fr.polyline(grid, ref, PALETTE[1])
        fr.legend(["empirical", "reference"])
    with open(filename, "w") as fh:
        fh.write(fr.svg())
