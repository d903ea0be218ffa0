"""Tiny dependency-free SVG renderer for scatter plots over a class raster."""

from __future__ import annotations

from typing import Optional

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf"]


def _lighten(color: str, amount: float = 0.7) -> str:
    rgb = [int(color[i:i + 2], 16) for i in (1, 3, 5)]
    return "#" + "".join(f"{int(c + (255 - c) * amount):02x}" for c in rgb)


def scatter_svg(points, labels, path, background: Optional[tuple] = None, size: int = 400,
                title: str = "", lines: Optional[list] = None) -> None:
    """Write an SVG scatter plot.

    ``background`` is ``(grid_x1, grid_x2, class_index_2d)`` drawn as light
    cells; ``lines`` is a list of ``(k, 2)`` polylines (e.g. trajectories).
    """
    P = np.asarray(points, dtype=float)
    labels = np.asarray(labels, dtype=int)
    xs = [P[:, 0]]
    ys = [P[:, 1]]
    if background is not None:
        xs.append(np.asarray(background[0]))
        ys.append(np.asarray(background[1]))
    for ln in lines or []:
        xs.append(np.asarray(ln)[:, 0])
        ys.append(np.asarray(ln)[:, 1])
    x0, x1 = min(a.min() for a in xs), max(a.max() for a in xs)
    y0, y1 = min(a.min() for a in ys), max(a.max() for a in ys)
    sx = (size - 20) / max(x1 - x0, 1e-12)
    sy = (size - 20) / max(y1 - y0, 1e-12)

    def px(x, y):
        return 10 + (x - x0) * sx, size - 10 - (y - y0) * sy

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        out.append(f'<title>{title}</title>')
    if background is not None:
        g1, g2, cls = np.asarray(background[0]), np.asarray(background[1]), np.asarray(background[2])
        w = (size - 20) / len(g1) + 0.5
        hgt = (size - 20) / len(g2) + 0.5
        for j, y in enumerate(g2):
            for i, x in enumerate(g1):
                cx, cy = px(x, y)
                color = _lighten(PALETTE[int(cls[j, i]) % len(PALETTE)])
                out.append(f'<rect x="{cx - w / 2:.2f}" y="{cy - hgt / 2:.2f}" width="{w:.2f}" '
                           f'height="{hgt:.2f}" fill="{color}"/>')
    for ln in lines or []:
        pts = " ".join("{:.2f},{:.2f}".format(*px(x, y)) for x, y in np.asarray(ln))
        out.append(f'<polyline points="{pts}" fill="none" stroke="#444" stroke-width="0.8"/>')
    for (x, y), k in zip(P, labels):
        cx, cy = px(x, y)
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2" fill="{PALETTE[k % len(PALETTE)]}"/>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
