"""Dependency-free SVG scatter of latent fingerprints."""

from __future__ import annotations

from typing import Mapping
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def project_2d(points: np.ndarray) -> np.ndarray:
    """Identity for 2-D codes, first two principal components otherwise."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[1] == 2:
        return points
    if points.shape[1] == 1:
        return np.hstack([points, np.zeros_like(points)])
    centred = points - points.mean(0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return centred @ vt[:2].T


def latent_svg(groups: Mapping[str, np.ndarray], title: str = "latent space", size: int = 640) -> str:
    """One colour per group: image points, a cross at the group mean and a legend entry."""
    names = list(groups)
    if not names:
        raise ValueError("nothing to plot")
    stacked = project_2d(np.concatenate([np.asarray(groups[n]) for n in names]))
    bounds = np.cumsum([0] + [len(groups[n]) for n in names])
    lo, hi = stacked.min(0), stacked.max(0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad, legend_w = 40, 180
    plot = size - 2 * pad

    def xy(p):
        q = (p - lo) / span
        return pad + q[0] * plot, pad + (1 - q[1]) * plot

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" height="{size}" '
        f'viewBox="0 0 {size + legend_w} {size}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="{pad}" y="{pad}" width="{plot}" height="{plot}" fill="none" stroke="#999"/>',
    ]
    for i, name in enumerate(names):
        colour = PALETTE[i % len(PALETTE)]
        pts = stacked[bounds[i] : bounds[i + 1]]
        out.append(f'<g class="points" data-dataset="{escape(name)}" fill="{colour}" fill-opacity="0.45">')
        out += [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2"/>' for x, y in map(xy, pts)]
        out.append("</g>")
        mx, my = xy(pts.mean(0))
        out.append(f'<path class="mean-marker" data-dataset="{escape(name)}" stroke="{colour}" stroke-width="3" '
                   f'd="M{mx - 7:.2f},{my - 7:.2f}L{mx + 7:.2f},{my + 7:.2f}M{mx - 7:.2f},{my + 7:.2f}'
                   f'L{mx + 7:.2f},{my - 7:.2f}"/>')
        ly = pad + 20 * i
        out.append(f'<g class="legend-entry"><rect x="{size + 4}" y="{ly}" width="12" height="12" fill="{colour}"/>'
                   f'<text x="{size + 22}" y="{ly + 11}" font-size="12" font-family="sans-serif">'
                   f'{escape(name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
