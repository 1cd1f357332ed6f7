"""Deterministic SVG rendering of packing instances and sampler trajectories."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .geometry import (
    Boundary,
    Container,
    PackingInstance,
    Strip,
    occupied_length,
    transformed_vertices,
)

__all__ = ["render_instance_svg", "render_trajectory_frames", "polygon_color"]


def polygon_color(index: int) -> str:
    """Stable per-index fill color (golden-angle hue walk)."""
    hue = (index * 137.508) % 360.0
    return f"hsl({hue:.1f},65%,60%)"


def _container_outline(container: Container, occ: float) -> tuple[str, tuple]:
    if isinstance(container, Strip):
        x0, y0, x1, y1 = 0.0, 0.0, max(occ, 1e-9), container.height
        pts = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    else:
        v = container.polygon.vertices
        x0, y0, x1, y1 = container.polygon.bounds
        pts = [tuple(p) for p in v]
    path = _path(pts)
    return path, (x0, y0, x1, y1)


def _path(points: Sequence[tuple[float, float]]) -> str:
    coords = " L ".join(f"{x:.6f} {-y:.6f}" for x, y in points)
    return f"M {coords} Z"


def render_instance_svg(inst: PackingInstance, path: str | None = None) -> str:
    """One filled path per polygon plus the container outline.

    Output bytes are deterministic for a fixed input (no timestamps, stable
    color assignment by polygon index).  The y axis is flipped so +y points
    up in the drawing.
    """
    occ = occupied_length(inst)
    outline, (x0, y0, x1, y1) = _container_outline(inst.container, occ)
    margin = 0.03 * max(x1 - x0, y1 - y0, 1e-9)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="{x0 - margin:.6f} {-(y1 + margin):.6f} '
        f'{(x1 - x0) + 2 * margin:.6f} {(y1 - y0) + 2 * margin:.6f}">'
    ]
    for i in range(len(inst)):
        verts = transformed_vertices(inst.polygons[i], inst.poses[i])
        parts.append(
            f'<path d="{_path([tuple(p) for p in verts])}" '
            f'fill="{polygon_color(i)}" stroke="#333" stroke-width="{margin / 10:.6f}"/>'
        )
    parts.append(
        f'<path d="{outline}" fill="none" stroke="#000" stroke-width="{margin / 5:.6f}"/>'
    )
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w") as fp:
            fp.write(svg)
    return svg


def render_trajectory_frames(
    inst: PackingInstance,
    pose_steps: Sequence[np.ndarray],
    path_pattern: str | None = None,
) -> list[str]:
    """One SVG per trajectory step; `pose_steps` holds raw (n, 4) pose arrays.

    `path_pattern` must contain a `{step}` placeholder when writing files.
    """
    from .diffusion import array_to_poses

    frames = []
    for k, coords in enumerate(pose_steps):
        frame_inst = inst.with_poses(array_to_poses(coords))
        out = None if path_pattern is None else path_pattern.format(step=k)
        frames.append(render_instance_svg(frame_inst, out))
    return frames
