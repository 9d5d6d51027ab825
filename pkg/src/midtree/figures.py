"""Plain SVG rendering of planar paths (no plotting dependency)."""
from __future__ import annotations

import numpy as np

MAJOR_EVERY = 8
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _fmt(v):
    return f"{v:.4f}"


def render_paths_svg(env, paths, size=480, margin=20):
    """SVG of the (x, y) part of each path.

    Every waypoint gets a ``circle`` with ``class="waypoint"``; every eighth
    waypoint (counting from the start) is drawn larger and filled.
    """
    if env.disk_bounded:
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    else:
        lo, hi = np.array(env.lower[:2]), np.array(env.upper[:2])
    scale = (size - 2 * margin) / float(np.max(hi - lo))

    def xy(p):
        x = margin + (p[0] - lo[0]) * scale
        y = size - margin - (p[1] - lo[1]) * scale
        return x, y

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>']
    if env.disk_bounded:
        cx, cy = xy((0.0, 0.0))
        out.append(f'<circle class="domain" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(scale)}" '
                   'fill="none" stroke="black"/>')
    for x0, x1, y0, y1 in env.obstacles:
        ax, ay = xy((x0, y1))
        out.append(f'<rect class="obstacle" x="{_fmt(ax)}" y="{_fmt(ay)}" '
                   f'width="{_fmt((x1 - x0) * scale)}" height="{_fmt((y1 - y0) * scale)}" '
                   'fill="#bbbbbb"/>')
    for k, path in enumerate(paths):
        path = np.asarray(path, dtype=np.float64)
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (xy(p) for p in path))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for i, p in enumerate(path):
            x, y = xy(p)
            if i % MAJOR_EVERY == 0:
                out.append(f'<circle class="waypoint" cx="{_fmt(x)}" cy="{_fmt(y)}" r="4" '
                           f'fill="{color}"/>')
            else:
                out.append(f'<circle class="waypoint" cx="{_fmt(x)}" cy="{_fmt(y)}" r="1.5" '
                           f'fill="none" stroke="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
