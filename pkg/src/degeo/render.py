"""SVG lineage heatmap.

Each cell is a vertical line running down its lifetime, shaded per time
point by intensity (dark = high) through a stepped gradient.  Divisions are
horizontal lines joining the two daughters.  Accepted branches get a red
outline and onset points a small marker.
"""

from __future__ import annotations

from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .lineage import LineageTree
from .scoring import ScoreTree
from .synth import birth_times

COLUMN = 8.0        # horizontal spacing of leaves, px
MINUTE = 2.0        # vertical px per minute
MARGIN = 20.0
STROKE = 3.0


def _series(tree) -> dict:
    """cell -> (times, values) for either tree flavour."""
    if isinstance(tree, LineageTree):
        return {n: (tree[n].times, tree[n].intensities) for n in tree}
    life = {n: tree.lifetime(n) for n in tree}
    births = birth_times(tree, life)
    return {n: (births[n] + np.arange(life[n]), np.full(life[n], tree.score(n))) for n in tree}


def _layout(tree) -> dict:
    """x position per cell: leaves left to right, mothers centered over daughters."""
    x = {}
    next_leaf = [0]

    def place(n):
        kids = tree.children(n)
        if not kids:
            x[n] = next_leaf[0]
            next_leaf[0] += 1
        else:
            for k in kids:
                place(k)
            x[n] = sum(x[k] for k in kids) / len(kids)

    for r in tree.roots:
        place(r)
    return x


def _gray(v, lo, hi) -> str:
    t = 0.0 if hi <= lo else (v - lo) / (hi - lo)
    t = min(max(t, 0.0), 1.0)
    level = int(round(235 - 235 * t))
    return f"#{level:02x}{level:02x}{level:02x}"


def _f(v) -> str:
    return f"{v:.2f}"


def render_svg(tree: LineageTree | ScoreTree, accepted: Iterable[str] = (),
               onsets: Sequence[tuple[str, int]] = (), title: str | None = None) -> str:
    series = _series(tree)
    xs = _layout(tree)
    t0 = min(int(t[0]) for t, _ in series.values())
    t1 = max(int(t[-1]) for t, _ in series.values())
    allv = np.concatenate([v for _, v in series.values()])
    lo, hi = np.quantile(allv, [0.01, 0.99]) if allv.size else (0.0, 1.0)

    def px(n):
        return MARGIN + xs[n] * COLUMN

    def py(t):
        return MARGIN + (t - t0) * MINUTE

    width = MARGIN * 2 + (max(xs.values(), default=0) + 1) * COLUMN
    height = MARGIN * 2 + (t1 - t0 + 1) * MINUTE
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" '
           f'height="{_f(height)}" viewBox="0 0 {_f(width)} {_f(height)}">']
    if title:
        out.append(f"<title>{escape(title)}</title>")
    out.append(f'<rect width="{_f(width)}" height="{_f(height)}" fill="white"/>')
    # divisions
    for n in tree:
        kids = tree.children(n)
        if len(kids) == 2:
            y = py(int(series[kids[0]][0][0]))
            out.append(f'<line class="division" x1="{_f(px(kids[0]))}" y1="{_f(y)}" '
                       f'x2="{_f(px(kids[1]))}" y2="{_f(y)}" stroke="black" stroke-width="1"/>')
    # cells: one line each, shaded per time point through a stepped gradient
    defs, lines = [], []
    for k, n in enumerate(tree):
        times, vals = series[n]
        x = _f(px(n))
        y0, y1 = py(int(times[0])), py(int(times[-1]) + 1)
        grad = f"g{k}"
        stops = []
        m = len(vals)
        for i, v in enumerate(vals.tolist()):
            color = _gray(v, lo, hi)
            stops.append(f'<stop offset="{i / m:.4f}" stop-color="{color}"/>')
            stops.append(f'<stop offset="{(i + 1) / m:.4f}" stop-color="{color}"/>')
        defs.append(f'<linearGradient id="{grad}" gradientUnits="userSpaceOnUse" '
                    f'x1="{x}" y1="{_f(y0)}" x2="{x}" y2="{_f(y1)}">' + "".join(stops)
                    + "</linearGradient>")
        lines.append(f'<line class="cell" id="{escape(n)}" x1="{x}" y1="{_f(y0)}" x2="{x}" '
                     f'y2="{_f(y1)}" stroke="url(#{grad})" stroke-width="{_f(STROKE)}"/>')
    out.append("<defs>" + "\n".join(defs) + "</defs>")
    out.extend(lines)
    # accepted branches
    for root in sorted(set(accepted)):
        if root not in tree:
            continue
        cells = [root] + tree.descendants(root)
        xl = min(px(c) for c in cells) - COLUMN / 2
        xr = max(px(c) for c in cells) + COLUMN / 2
        yt = py(int(series[root][0][0]))
        yb = max(py(int(series[c][0][-1]) + 1) for c in cells)
        out.append(f'<rect class="branch" data-root="{escape(root)}" x="{_f(xl)}" y="{_f(yt)}" '
                   f'width="{_f(xr - xl)}" height="{_f(yb - yt)}" fill="none" '
                   f'stroke="red" stroke-width="1.5"/>')
    for cell, t in onsets:
        if cell in tree:
            out.append(f'<circle class="onset" cx="{_f(px(cell))}" cy="{_f(py(t))}" r="3" '
                       f'fill="none" stroke="blue" stroke-width="1.2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
