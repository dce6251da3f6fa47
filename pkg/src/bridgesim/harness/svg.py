"""Static SVG line plots with no plotting dependency."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PANEL_W, PANEL_H = 600, 400
_MARGIN = dict(left=80, right=20, top=40, bottom=50)
_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


@dataclass
class Panel:
    title: str
    t: np.ndarray
    curves: list = field(default_factory=list)  # (values, colour) pairs

    def add(self, values, colour: str | None = None) -> None:
        colour = colour or _COLOURS[len(self.curves) % len(_COLOURS)]
        self.curves.append((np.asarray(values, dtype=float), colour))


def _fmt(x: float) -> str:
    return f"{x:.4g}"


def _panel_svg(panel: Panel, ox: int, oy: int) -> list[str]:
    left, top = ox + _MARGIN["left"], oy + _MARGIN["top"]
    w = PANEL_W - _MARGIN["left"] - _MARGIN["right"]
    h = PANEL_H - _MARGIN["top"] - _MARGIN["bottom"]
    t = np.asarray(panel.t, dtype=float)
    ys = [c for c, _ in panel.curves]
    ymin = min(float(np.min(c)) for c in ys) if ys else 0.0
    ymax = max(float(np.max(c)) for c in ys) if ys else 1.0
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    tmin, tmax = float(t[0]), float(t[-1])

    def px(tv):
        return left + (tv - tmin) / (tmax - tmin) * w

    def py(yv):
        return top + (ymax - yv) / (ymax - ymin) * h

    out = [
        f'<text x="{ox + PANEL_W / 2:.1f}" y="{oy + 24}" text-anchor="middle" '
        f'font-size="16">{escape(panel.title)}</text>',
        f'<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="#000"/>',
    ]
    for tv, anchor in ((tmin, "start"), (tmax, "end")):
        x = px(tv)
        out.append(f'<line x1="{x:.2f}" y1="{top + h}" x2="{x:.2f}" y2="{top + h + 6}" stroke="#000"/>')
        out.append(f'<text x="{x:.2f}" y="{top + h + 20}" text-anchor="{anchor}" font-size="12">{_fmt(tv)}</text>')
    for yv in (ymin, ymax):
        y = py(yv)
        out.append(f'<line x1="{left - 6}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="#000"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="12">{_fmt(yv)}</text>')
    out.append(f'<text x="{left + w / 2:.1f}" y="{top + h + 40}" text-anchor="middle" font-size="12">t</text>')
    # at most ~2 points per pixel column keeps files small without visible change
    stride = max(1, len(t) // (2 * w))
    idx = np.unique(np.r_[np.arange(0, len(t), stride), len(t) - 1])
    for values, colour in panel.curves:
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(t[idx], values[idx]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1"/>')
    return out


def render(panels: Sequence[Panel], columns: int = 2) -> str:
    """Panels on a grid of ``columns``, each PANEL_W x PANEL_H."""
    columns = min(columns, len(panels))
    rows = -(-len(panels) // columns)
    W, H = columns * PANEL_W, rows * PANEL_H
    body = []
    for k, panel in enumerate(panels):
        body.extend(_panel_svg(panel, (k % columns) * PANEL_W, (k // columns) * PANEL_H))
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="#fff"/>',
        *body,
        "</svg>",
        "",
    ])
