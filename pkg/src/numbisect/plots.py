"""Minimal SVG 1.1 writers for curves, scatter plots and bar histograms.

Output is plain text built from fixed-precision numbers, so identical
inputs give byte-identical files.
"""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 40, 50


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Canvas:
    def __init__(self, title: str, xlim: tuple[float, float], ylim: tuple[float, float]):
        self.parts: list[str] = []
        self.xlim, self.ylim = xlim, ylim
        self.parts.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">'
                          f'{escape(title)}</text>')
        self.parts.append(f'<rect x="{LEFT}" y="{TOP}" width="{WIDTH - LEFT - RIGHT}" '
                          f'height="{HEIGHT - TOP - BOTTOM}" fill="none" stroke="#000"/>')

    def x(self, v: float) -> float:
        lo, hi = self.xlim
        return LEFT + (v - lo) / (hi - lo) * (WIDTH - LEFT - RIGHT)

    def y(self, v: float) -> float:
        lo, hi = self.ylim
        return HEIGHT - BOTTOM - (v - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM)

    def xtick(self, v: float, label: str):
        self.parts.append(f'<text x="{_f(self.x(v))}" y="{HEIGHT - BOTTOM + 16}" '
                          f'text-anchor="middle" font-size="11">{escape(label)}</text>')

    def ytick(self, v: float, label: str):
        self.parts.append(f'<text x="{LEFT - 6}" y="{_f(self.y(v) + 4)}" '
                          f'text-anchor="end" font-size="11">{escape(label)}</text>')

    def axis_labels(self, xlabel: str, ylabel: str):
        self.parts.append(f'<text x="{(LEFT + WIDTH - RIGHT) / 2}" y="{HEIGHT - 12}" '
                          f'text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
        cy = (TOP + HEIGHT - BOTTOM) / 2
        self.parts.append(f'<text x="16" y="{cy}" text-anchor="middle" font-size="12" '
                          f'transform="rotate(-90 16 {cy})">{escape(ylabel)}</text>')

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
                f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">\n'
                f'<rect width="100%" height="100%" fill="#fff"/>\n{body}\n</svg>\n')


def curve_svg(curves: Mapping[str, object], title: str = "") -> str:
    """Proportion of 'many' against numerosity, one polyline with CI band per curve."""
    cv = _Canvas(title, (0.5, 7.5), (0.0, 1.0))
    for n in range(1, 8):
        cv.xtick(n, str(n))
    for v in (0.0, 0.5, 1.0):
        cv.ytick(v, f"{v:.1f}")
    cv.parts.append(f'<line x1="{LEFT}" x2="{WIDTH - RIGHT}" y1="{_f(cv.y(0.5))}" y2="{_f(cv.y(0.5))}" '
                    f'stroke="#999" stroke-dasharray="4 3"/>')
    for i, (name, curve) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = np.asarray(curve.points)
        ns = np.arange(1, len(pts) + 1)
        lo, hi = getattr(curve, "ci_low", None), getattr(curve, "ci_high", None)
        if lo is not None and hi is not None:
            band = [(cv.x(n), cv.y(h)) for n, h in zip(ns, hi)] + \
                   [(cv.x(n), cv.y(l)) for n, l in zip(ns[::-1], np.asarray(lo)[::-1])]
            cv.parts.append(f'<polygon points="{" ".join(f"{_f(a)},{_f(b)}" for a, b in band)}" '
                            f'fill="{color}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{_f(cv.x(n))},{_f(cv.y(p))}" for n, p in zip(ns, pts))
        cv.parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for n, p in zip(ns, pts):
            cv.parts.append(f'<circle cx="{_f(cv.x(n))}" cy="{_f(cv.y(p))}" r="3" fill="{color}"/>')
        cv.parts.append(f'<text x="{LEFT + 8}" y="{TOP + 14 + 14 * i}" font-size="11" fill="{color}">'
                        f'{escape(str(name))}</text>')
    cv.axis_labels("numerosity", "proportion 'many'")
    return cv.render()


def scatter_svg(coords, labels, title: str = "") -> str:
    """2D projection coloured by integer label, with a legend."""
    coords = np.asarray(coords, dtype=float)
    labels = np.asarray(labels)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    pad = np.where(hi > lo, 0.05 * (hi - lo), 1.0)
    cv = _Canvas(title, (lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1]))
    uniq = sorted(set(labels.tolist()))
    color = {u: PALETTE[i % len(PALETTE)] for i, u in enumerate(uniq)}
    for (a, b), lab in zip(coords, labels):
        cv.parts.append(f'<circle cx="{_f(cv.x(a))}" cy="{_f(cv.y(b))}" r="2" '
                        f'fill="{color[lab]}" fill-opacity="0.7"/>')
    for i, u in enumerate(uniq):
        cv.parts.append(f'<text x="{WIDTH - RIGHT - 8}" y="{TOP + 14 + 13 * i}" text-anchor="end" '
                        f'font-size="11" fill="{color[u]}">{escape(str(u))}</text>')
    cv.axis_labels("dimension 1", "dimension 2")
    return cv.render()


def bar_svg(values: Mapping[str, float], title: str = "", ylabel: str = "count") -> str:
    """Vertical bars in the given key order."""
    keys = list(values)
    top = max([float(v) for v in values.values()] + [1.0])
    cv = _Canvas(title, (0.0, max(len(keys), 1)), (0.0, top * 1.1))
    width = (WIDTH - LEFT - RIGHT) / max(len(keys), 1)
    for i, k in enumerate(keys):
        v = float(values[k])
        x0 = cv.x(i) + 0.15 * width
        cv.parts.append(f'<rect x="{_f(x0)}" y="{_f(cv.y(v))}" width="{_f(0.7 * width)}" '
                        f'height="{_f(cv.y(0) - cv.y(v))}" fill="{PALETTE[0]}"/>')
        cv.xtick(i + 0.5, str(k))
    for v in (0.0, top):
        cv.ytick(v, f"{v:g}")
    cv.axis_labels("", ylabel)
    return cv.render()


def gallery_markdown(row_labels: Sequence[str], col_labels: Sequence[str],
                     cells: Mapping[tuple[str, str], str], corner: str = "") -> str:
    """Markdown table with one cell per (row, column); missing cells stay blank."""
    out = ["| " + " | ".join([corner, *col_labels]) + " |", "|" + "---|" * (len(col_labels) + 1)]
    for r in row_labels:
        out.append("| " + " | ".join([r, *(cells.get((r, c), "") for c in col_labels)]) + " |")
    return "\n".join(out)
