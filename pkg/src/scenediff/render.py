"""Static SVG rendering of scenes: trajectories as polylines, observed
frames circled, home/away teams colored, the ball highlighted, a star at
the initial position of every agent."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scene import Scene

BALL_COLOR = "#f2b01e"
HOME_COLOR = "#2a6fdb"
AWAY_COLOR = "#d64fa8"
FIELD_COLOR = "#f4f7f2"
SCALE = 30.0
PAD = 20.0


def _team_color(n: int, N: int) -> str:
    if n == 0:
        return BALL_COLOR
    home_cut = (N - 1 + 1) // 2
    return HOME_COLOR if n <= home_cut else AWAY_COLOR


def _pt(xy, ey):
    # svg y grows downward; flip the pitch vertically
    return PAD + SCALE * xy[0], PAD + SCALE * (ey - xy[1])


def _star(cx, cy, r, color):
    pts = []
    for i in range(10):
        ang = -np.pi / 2 + i * np.pi / 5
        rad = r if i % 2 == 0 else r * 0.45
        pts.append(f"{cx + rad * np.cos(ang):.2f},{cy + rad * np.sin(ang):.2f}")
    return f'<polygon points="{" ".join(pts)}" fill="{color}" stroke="black" stroke-width="0.5"/>'


def render_scene_svg(scene: Scene, out_path, mask=None) -> Path:
    ex, ey = scene.meta.field_extent
    w, h = ex * SCALE + 2 * PAD, ey * SCALE + 2 * PAD
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
        f'viewBox="0 0 {w:.0f} {h:.0f}">',
        f'<rect x="{PAD}" y="{PAD}" width="{ex * SCALE:.1f}" height="{ey * SCALE:.1f}" '
        f'fill="{FIELD_COLOR}" stroke="#555"/>',
    ]
    T, N = scene.meta.T, scene.meta.N
    for n in range(N):
        color = _team_color(n, N)
        width = 3.0 if n == 0 else 1.6
        coords = [_pt(scene.Y[t, n], ey) for t in range(T)]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in coords)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="{width}" opacity="0.85"/>')
        if mask is not None:
            for t in range(T):
                if mask[t, n] > 0:
                    x, y = coords[t]
                    parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" '
                                 f'fill="none" stroke="{color}" stroke-width="1"/>')
        x0, y0 = coords[0]
        parts.append(_star(x0, y0, 7 if n == 0 else 6, color))
    parts.append("</svg>")
    out = Path(out_path)
    out.write_text("\n".join(parts), encoding="utf-8")
    return out
