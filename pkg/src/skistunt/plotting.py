"""Static SVG figures built from run logs.

Only polylines, circles and text are emitted, so output is a pure function
of the input arrays (plus an optional timestamp comment).
"""
from __future__ import annotations

import datetime as _dt
import math
from pathlib import Path

import numpy as np

from .simulator import RunLog

W, HGT = 640, 420
PAD_L, PAD_R, PAD_T, PAD_B = 70, 20, 36, 50
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [round(start + i * step, 10) for i in range(int((hi - start) / step) + 1)]


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if abs(v) < 1e4 else f"{v:.3g}"


class Figure:
    """Single-axes line chart; coordinates are mapped once limits are known."""

    def __init__(self, title: str, xlabel: str, ylabel: str, equal: bool = False):
        self.title, self.xlabel, self.ylabel, self.equal = title, xlabel, ylabel, equal
        self.lines: list = []
        self.circles: list = []
        self.hlines: list = []
        self.vlines: list = []

    def line(self, x, y, label: str | None = None, dash: bool = False):
        self.lines.append((np.asarray(x, float), np.asarray(y, float), label, dash))

    def circle(self, cx, cy, r, fill="none", stroke="#555", dash=False):
        self.circles.append((cx, cy, r, fill, stroke, dash))

    def hline(self, y, label=None):
        self.hlines.append((y, label))

    def vline(self, x, label=None):
        self.vlines.append((x, label))

    def _limits(self):
        xs = [a for x, _, _, _ in self.lines for a in (np.nanmin(x), np.nanmax(x)) if x.size]
        ys = [a for _, y, _, _ in self.lines for a in (np.nanmin(y), np.nanmax(y)) if y.size]
        for cx, cy, r, *_ in self.circles:
            xs += [cx - r, cx + r]
            ys += [cy - r, cy + r]
        ys += [y for y, _ in self.hlines]
        xs += [x for x, _ in self.vlines]
        if not xs:
            xs, ys = [0.0, 1.0], [0.0, 1.0]
        x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
        if x1 - x0 < 1e-12:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 - y0 < 1e-12:
            y0, y1 = y0 - 0.5, y1 + 0.5
        mx, my = 0.04 * (x1 - x0), 0.06 * (y1 - y0)
        x0, x1, y0, y1 = x0 - mx, x1 + mx, y0 - my, y1 + my
        if self.equal:
            pw, ph = W - PAD_L - PAD_R, HGT - PAD_T - PAD_B
            sx, sy = (x1 - x0) / pw, (y1 - y0) / ph
            if sx > sy:
                c, half = 0.5 * (y0 + y1), 0.5 * sx * ph
                y0, y1 = c - half, c + half
            else:
                c, half = 0.5 * (x0 + x1), 0.5 * sy * pw
                x0, x1 = c - half, c + half
        return x0, x1, y0, y1

    def render(self, timestamp: bool = False) -> str:
        x0, x1, y0, y1 = self._limits()
        pw, ph = W - PAD_L - PAD_R, HGT - PAD_T - PAD_B

        def X(v):
            return PAD_L + (v - x0) / (x1 - x0) * pw

        def Y(v):
            return PAD_T + (y1 - v) / (y1 - y0) * ph

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{HGT}" '
               f'viewBox="0 0 {W} {HGT}" font-family="sans-serif" font-size="12">']
        if timestamp:
            out.append(f"<!-- generated {_dt.datetime.now().isoformat(timespec='seconds')} -->")
        out.append(f'<rect x="0" y="0" width="{W}" height="{HGT}" fill="white"/>')
        out.append(f'<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>')
        for t in _nice_ticks(x0, x1):
            out.append(f'<line x1="{X(t):.2f}" y1="{PAD_T + ph}" x2="{X(t):.2f}" y2="{PAD_T + ph + 4}" stroke="#000"/>')
            out.append(f'<text x="{X(t):.2f}" y="{PAD_T + ph + 17}" text-anchor="middle">{_fmt(t)}</text>')
        for t in _nice_ticks(y0, y1):
            out.append(f'<line x1="{PAD_L - 4}" y1="{Y(t):.2f}" x2="{PAD_L}" y2="{Y(t):.2f}" stroke="#000"/>')
            out.append(f'<text x="{PAD_L - 7}" y="{Y(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
        out.append(f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{self.title}</text>')
        out.append(f'<text x="{PAD_L + pw / 2}" y="{HGT - 10}" text-anchor="middle">{self.xlabel}</text>')
        out.append(f'<text x="16" y="{PAD_T + ph / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {PAD_T + ph / 2})">{self.ylabel}</text>')
        out.append(f'<clipPath id="plot"><rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}"/></clipPath>')
        out.append('<g clip-path="url(#plot)">')
        for cx, cy, r, fill, stroke, dash in self.circles:
            rx, ry = r / (x1 - x0) * pw, r / (y1 - y0) * ph
            d = ' stroke-dasharray="4 3"' if dash else ""
            out.append(f'<ellipse cx="{X(cx):.2f}" cy="{Y(cy):.2f}" rx="{rx:.2f}" ry="{ry:.2f}" '
                       f'fill="{fill}" stroke="{stroke}"{d}/>')
        for y, _ in self.hlines:
            out.append(f'<line x1="{PAD_L}" y1="{Y(y):.2f}" x2="{PAD_L + pw}" y2="{Y(y):.2f}" '
                       'stroke="#444" stroke-dasharray="6 4"/>')
        for x, _ in self.vlines:
            out.append(f'<line x1="{X(x):.2f}" y1="{PAD_T}" x2="{X(x):.2f}" y2="{PAD_T + ph}" '
                       'stroke="#444" stroke-dasharray="6 4"/>')
        for i, (x, y, _, dash) in enumerate(self.lines):
            ok = np.isfinite(x) & np.isfinite(y)
            pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(x[ok], y[ok]))
            d = ' stroke-dasharray="5 3"' if dash else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" '
                       f'stroke-width="1.6"{d}/>')
        out.append("</g>")
        labels = [(i, lab) for i, (_, _, lab, _) in enumerate(self.lines) if lab]
        for k, (i, lab) in enumerate(labels):
            yy = PAD_T + 14 + 16 * k
            out.append(f'<line x1="{PAD_L + pw - 110}" y1="{yy - 4}" x2="{PAD_L + pw - 90}" y2="{yy - 4}" '
                       f'stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="2"/>')
            out.append(f'<text x="{PAD_L + pw - 85}" y="{yy}">{lab}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _label(log: RunLog, i: int, labels) -> str:
    return labels[i] if labels and i < len(labels) else f"run {i}"


def trajectory(logs: list[RunLog], obstacles=(), labels=None) -> Figure:
    fig = Figure("Trajectory", "x [m]", "y [m]", equal=True)
    for xc, yc, R, Re in obstacles:
        fig.circle(xc, yc, R + Re, fill="#e6e6e6", stroke="#999", dash=True)
        fig.circle(xc, yc, R, fill="#bbbbbb", stroke="#333")
    for i, log in enumerate(logs):
        fig.line(log.col("x"), log.col("y"), _label(log, i, labels))
    return fig


def _time(log: RunLog, normalized: bool):
    return log.col("t_norm") if normalized else log.col("t")


def roll(logs, labels=None, phi_max_deg=None, normalized=False) -> Figure:
    fig = Figure("Roll angle", "normalized time" if normalized else "t [s]", "roll [deg]")
    for i, log in enumerate(logs):
        t = _time(log, normalized)
        fig.line(t, np.degrees(log.col("phi")), _label(log, i, labels))
    if len(logs) == 1:
        fig.line(_time(logs[0], normalized), np.degrees(logs[0].col("phi_e")), "BEM", dash=True)
    if phi_max_deg is not None:
        fig.hline(phi_max_deg)
    return fig


def steering(logs, labels=None, normalized=False) -> Figure:
    fig = Figure("Steering angle", "normalized time" if normalized else "t [s]", "steer [deg]")
    for i, log in enumerate(logs):
        fig.line(_time(log, normalized), log.col("steer_deg"), _label(log, i, labels))
    return fig


def cbf_value(logs, labels=None, normalized=False, n_obstacles: int | None = None) -> Figure:
    """Smallest obstacle barrier per sample; obstacle columns come first in the log."""
    fig = Figure("CBF value", "normalized time" if normalized else "t [s]", "h [m^2]")
    for i, log in enumerate(logs):
        h = log.h()
        k = h.shape[1] if n_obstacles is None else n_obstacles
        if k == 0:
            continue
        fig.line(_time(log, normalized), h[:, :k].min(axis=1), _label(log, i, labels))
    fig.hline(0.0)
    return fig


def phase_portrait(log: RunLog, phi_max_deg=None, phi_dot_max_deg=None, label=None) -> Figure:
    fig = Figure("Roll phase portrait", "roll [deg]", "roll rate [deg/s]")
    fig.line(np.degrees(log.col("phi")), np.degrees(log.col("phi_dot")), label)
    if phi_max_deg is not None:
        fig.vline(phi_max_deg)
    if phi_dot_max_deg is not None:
        fig.hline(phi_dot_max_deg)
        fig.hline(-phi_dot_max_deg)
    return fig


def tracking_errors(log: RunLog) -> Figure:
    fig = Figure("Tracking errors", "t [s]", "error")
    t = log.col("t")
    fig.line(t, log.col("e_track"), "planar [m]")
    fig.line(t, log.col("phi") - log.col("phi_e"), "roll [rad]")
    return fig


def write(fig: Figure, path, deterministic: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(fig.render(timestamp=not deterministic))
    return path
