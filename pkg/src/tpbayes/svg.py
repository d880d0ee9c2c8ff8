"""Minimal in-process SVG line and ribbon plots."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = 50


def _nice_ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(np.ceil(lo / step) * step, hi + 0.5 * step, step)


class _Frame:
    def __init__(self, x, ys):
        self.x0, self.x1 = float(np.min(x)), float(np.max(x))
        lo = min(float(np.min(y)) for y in ys)
        hi = max(float(np.max(y)) for y in ys)
        pad = 0.05 * (hi - lo or 1.0)
        self.y0, self.y1 = lo - pad, hi + pad
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0

    def px(self, x):
        return MARGIN + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def py(self, y):
        return HEIGHT - MARGIN - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)


def _path(xs, ys) -> str:
    return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))


def band_svg(x, center, lower, upper, truth=None, title: str = "", header: str = "") -> str:
    """Ribbon ``[lower, upper]`` with the center line and an optional reference curve."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    x, center, lower, upper = (np.asarray(a, dtype=float)[order] for a in (x, center, lower, upper))
    curves = [lower, upper, center]
    if truth is not None:
        truth = np.asarray(truth, dtype=float)[order]
        curves.append(truth)
    fr = _Frame(x, curves)
    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    if header:
        out.append(f"<!-- {escape(header)} -->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
               f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">')
    out.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    # axes and ticks
    left, right, bottom, top = MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN
    out.append(f'<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" stroke="black" fill="none"/>')
    for t in _nice_ticks(fr.x0, fr.x1):
        p = fr.px(t)
        out.append(f'<line x1="{p:.2f}" y1="{bottom}" x2="{p:.2f}" y2="{bottom + 4}" stroke="black"/>')
        out.append(f'<text x="{p:.2f}" y="{bottom + 16}" text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(fr.y0, fr.y1):
        p = fr.py(t)
        out.append(f'<line x1="{left - 4}" y1="{p:.2f}" x2="{left}" y2="{p:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{p + 4:.2f}" text-anchor="end">{t:.3g}</text>')
    ribbon = _path(fr.px(x), fr.py(upper)) + " " + _path(fr.px(x[::-1]), fr.py(lower[::-1]))
    out.append(f'<polygon points="{ribbon}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>')
    out.append(f'<polyline points="{_path(fr.px(x), fr.py(center))}" fill="none" stroke="#08519c" stroke-width="1.5"/>')
    if truth is not None:
        out.append(f'<polyline points="{_path(fr.px(x), fr.py(truth))}" fill="none" stroke="#cb181d" '
                   'stroke-width="1.2" stroke-dasharray="4 3"/>')
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
