"""Static SVG views of a plan built from primitive shapes.

Output carries no timestamps or random ids, so equal plans give equal
bytes.
"""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#17becf")


def color(i: int) -> str:
    return PALETTE[i % len(PALETTE)]


def _f(v) -> str:
    return f"{float(v):.2f}"


class _Canvas:
    """World-to-pixel mapping with y pointing up."""

    def __init__(self, x0, x1, y0, y1, width=640, margin=40):
        self.x0, self.y0 = x0, y0
        span = max(x1 - x0, 1e-9)
        self.s = (width - 2 * margin) / span
        self.m = margin
        self.w = width
        self.h = int(math.ceil((y1 - y0) * self.s + 2 * margin))
        self.items = []

    def px(self, x, y):
        return self.m + (x - self.x0) * self.s, self.h - self.m - (y - self.y0) * self.s

    def rect(self, x0, x1, y0, y1, fill, opacity=1.0, stroke="none"):
        a, b = self.px(x0, y1)
        self.items.append(f'<rect x="{_f(a)}" y="{_f(b)}" width="{_f((x1 - x0) * self.s)}" '
                          f'height="{_f((y1 - y0) * self.s)}" fill="{fill}" '
                          f'fill-opacity="{opacity:.2f}" stroke="{stroke}" stroke-width="0.5"/>')

    def polygon(self, pts, fill, opacity=1.0, stroke="none"):
        p = " ".join(f"{_f(a)},{_f(b)}" for a, b in (self.px(x, y) for x, y in pts))
        self.items.append(f'<polygon points="{p}" fill="{fill}" fill-opacity="{opacity:.2f}" '
                          f'stroke="{stroke}" stroke-width="0.5"/>')

    def polyline(self, pts, stroke, width=1.5, dash=None):
        p = " ".join(f"{_f(a)},{_f(b)}" for a, b in (self.px(x, y) for x, y in pts))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline points="{p}" fill="none" stroke="{stroke}" '
                          f'stroke-width="{width}"{d}/>')

    def text(self, x, y, s, size=11, anchor="start", raw=False):
        a, b = (x, y) if raw else self.px(x, y)
        self.items.append(f'<text x="{_f(a)}" y="{_f(b)}" font-size="{size}" '
                          f'font-family="sans-serif" text-anchor="{anchor}">{escape(s)}</text>')

    def frame(self, x0, x1, y0, y1):
        self.rect(x0, x1, y0, y1, "none", 1.0, "#444444")

    def render(self, title=""):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">')
        body = [head, f'<rect width="{self.w}" height="{self.h}" fill="white"/>']
        if title:
            body.append(f'<text x="{self.m}" y="{self.m * 0.6:.1f}" font-size="13" '
                        f'font-family="sans-serif">{escape(title)}</text>')
        return "\n".join(body + self.items + ["</svg>"]) + "\n"


def _static_boxes(scenario):
    return [o.at(0) for o in scenario.obstacles if o.is_static]


def plot_xy(scenario, trajectories, guidance=None) -> str:
    """Top view: obstacles, guidance (dashed), trajectories and car boxes
    every time unit."""
    x0, x1, y0, y1 = scenario.grid.extent
    c = _Canvas(x0, x1, y0, y1)
    c.frame(x0, x1, y0, y1)
    for b in _static_boxes(scenario):
        c.rect(*b, "#888888", 0.8)
    for i, v in enumerate(scenario.vehicles):
        col = color(i)
        if guidance and v.id in guidance:
            c.polyline(guidance[v.id].samples[:, :2], col, 1.0, "4,3")
        tr = next((t for t in trajectories if t.vehicle_id == v.id), None)
        if tr is None:
            continue
        c.polyline(tr.states[:, :2], col, 1.8)
        for t in range(0, len(tr.states), tr.steps_per_unit):
            c.polygon(v.footprint(tr.states[t, :3]), col, 0.25, col)
        c.text(tr.states[0, 0], tr.states[0, 1], f"{v.id}", 12)
    return c.render(f"{scenario.name}: trajectories")


def plot_corridor(scenario, corridor, trajectory=None, shift=(0.35, 0.5)) -> str:
    """Oblique x-y-t view of one corridor: cube k is drawn as a translucent
    rectangle offset by ``k * shift`` (in map units per time unit)."""
    v = scenario.vehicle(corridor.vehicle_id)
    K = len(corridor.cubes) - 1
    b = corridor.bounds_array()
    sx, sy = shift
    ex0, ex1, ey0, ey1 = scenario.grid.extent
    span = max(ex1 - ex0, ey1 - ey0) / max(K, 1)
    dx, dy = sx * span * 0.5, sy * span * 0.5
    x0 = min(ex0, b[:, 0].min())
    x1 = max(ex1, b[:, 1].max()) + K * dx
    y0 = min(ey0, b[:, 2].min())
    y1 = max(ey1, b[:, 3].max()) + K * dy
    c = _Canvas(x0, x1, y0, y1)
    col = color([u.id for u in scenario.vehicles].index(v.id))
    for ob in _static_boxes(scenario):
        c.rect(*ob, "#888888", 0.5)
    for k in range(K + 1):
        bx0, bx1, by0, by1 = b[k]
        c.rect(bx0 + k * dx, bx1 + k * dx, by0 + k * dy, by1 + k * dy, col, 0.12, col)
    piv = corridor.pivots() + np.arange(K + 1)[:, None] * [dx, dy]
    c.polyline(piv, "#000000", 1.0, "2,2")
    if trajectory is not None:
        tt = np.arange(len(trajectory.states)) / trajectory.steps_per_unit
        c.polyline(trajectory.states[:, :2] + tt[:, None] * [dx, dy], col, 1.8)
    c.text(8, c.h - 8, f"cube k drawn shifted by k*({dx:.2f}, {dy:.2f}) m", 10, raw=True)
    return c.render(f"{scenario.name}: corridor of vehicle {v.id} (x, y, t)")


def _chart(c, trajectories, scenario, col_idx, y_lo, y_hi, label, top, height, tmax):
    x_at = lambda t: c.m + t / tmax * (c.w - 2 * c.m)
    y_at = lambda val: top + height - (val - y_lo) / max(y_hi - y_lo, 1e-9) * height
    c.items.append(f'<rect x="{c.m}" y="{_f(top)}" width="{c.w - 2 * c.m}" height="{_f(height)}" '
                   f'fill="none" stroke="#444444" stroke-width="0.5"/>')
    for val in (y_lo, y_hi):
        c.text(c.m - 4, y_at(val) + 4, f"{val:.1f}", 10, "end", raw=True)
    if y_lo < 0 < y_hi:
        c.items.append(f'<line x1="{c.m}" x2="{c.w - c.m}" y1="{_f(y_at(0))}" y2="{_f(y_at(0))}" '
                       f'stroke="#bbbbbb" stroke-width="0.5"/>')
    c.text(c.m, top - 4, label, 11, raw=True)
    ids = [v.id for v in scenario.vehicles]
    for tr in trajectories:
        t = np.arange(len(tr.states)) * tr.dt
        pts = " ".join(f"{_f(x_at(a))},{_f(y_at(b))}" for a, b in zip(t, tr.states[:, col_idx]))
        c.items.append(f'<polyline points="{pts}" fill="none" '
                       f'stroke="{color(ids.index(tr.vehicle_id))}" stroke-width="1.5"/>')


def plot_va(scenario, trajectories) -> str:
    """Speed and acceleration over time for every vehicle."""
    c = _Canvas(0.0, 1.0, 0.0, 1.0, width=640)
    c.h = 460
    if not trajectories:
        return c.render(f"{scenario.name}: v(t), a(t)")
    tmax = max(len(t.states) - 1 for t in trajectories) * trajectories[0].dt or 1.0
    V = np.concatenate([t.states[:, 4] for t in trajectories])
    A = np.concatenate([t.states[:, 5] for t in trajectories])
    vlo, vhi = min(0.0, V.min()), max(V.max(), 1.0)
    alo, ahi = min(A.min(), -1.0), max(A.max(), 1.0)
    _chart(c, trajectories, scenario, 4, vlo, vhi, "v (m/s)", 60, 150, tmax)
    _chart(c, trajectories, scenario, 5, alo, ahi, "a (m/s^2)", 260, 150, tmax)
    c.text(c.w / 2, 440, f"t (s), 0 to {tmax:.1f}", 10, "middle", raw=True)
    for i, v in enumerate(scenario.vehicles):
        c.items.append(f'<text x="{c.w - c.m - 60}" y="{20 + 14 * i}" font-size="11" '
                       f'font-family="sans-serif" fill="{color(i)}">vehicle {v.id}</text>')
    return c.render(f"{scenario.name}: v(t), a(t)")
