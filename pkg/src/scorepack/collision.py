"""Overlap queries and separation vectors for convex and non-convex polygons.

Non-convex shapes are decomposed into convex parts (constrained Delaunay
triangulation followed by a Hertel-Mehlhorn style merge).  Pairwise
minimal translation vectors come from the Separating Axis Theorem; the
non-convex aggregate sums per-part MTVs and caps the magnitude at the
deepest single pair, which resolves shallow multi-contact overlaps in
one step without overshooting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import Polygon as ShapelyPolygon

from .geometry import (
    CONTACT_TOL,
    Boundary,
    Container,
    GeometryError,
    PackingInstance,
    Polygon,
    Pose,
    Strip,
    snapped,
    transformed_vertices,
)

__all__ = [
    "SeparationVector",
    "ConvexDecomposition",
    "OverlapReport",
    "convex_decompose",
    "sat_mtv",
    "separation_vector",
    "boundary_offset",
    "overlap_area",
]


@dataclass(frozen=True)
class SeparationVector:
    """Translation that moves the first polygon of an ordered pair out of overlap."""

    dx: float
    dy: float
    depth: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy])


SeparationVector.ZERO = SeparationVector(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ConvexDecomposition:
    parts: tuple[Polygon, ...]


def _is_convex(vertices: np.ndarray, tol: float = 1e-9) -> bool:
    edges = np.roll(vertices, -1, axis=0) - vertices
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    norm = np.hypot(edges[:, 0], edges[:, 1]) * np.hypot(nxt[:, 0], nxt[:, 1])
    return bool(np.all(cross >= -tol * norm))


def _merge_cycle(a: list, b: list, u, v) -> list:
    """Join two CCW cycles along the shared directed edge u->v in `a`."""
    # walk a from v around to u (inclusive), then b from after u to before v
    iv = a.index(v)
    ib = b.index(u)
    out = [a[(iv + k) % len(a)] for k in range(len(a))]  # v ... u
    out += [b[(ib + 1 + k) % len(b)] for k in range(len(b) - 2)]  # after u ... before v
    return out


def _has_collinear(vertices: np.ndarray, tol: float = 1e-9) -> bool:
    edges = np.roll(vertices, -1, axis=0) - vertices
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    norm = np.hypot(edges[:, 0], edges[:, 1]) * np.hypot(nxt[:, 0], nxt[:, 1])
    return bool(np.any(np.abs(cross) <= tol * norm))


def _hertel_mehlhorn(triangles: list[list[tuple[float, float]]]) -> list[list[tuple[float, float]]]:
    parts: dict[int, list] = {i: t for i, t in enumerate(triangles)}
    # interior diagonals: directed edge (u, v) in one part appears as (v, u) in another
    def edge_map():
        m: dict[tuple, int] = {}
        for pid, cyc in parts.items():
            for k in range(len(cyc)):
                m[(cyc[k], cyc[(k + 1) % len(cyc)])] = pid
        return m

    changed = True
    while changed:
        changed = False
        edges = edge_map()
        candidates = []
        for (u, v), pid in edges.items():
            qid = edges.get((v, u))
            if qid is None or qid == pid:
                continue
            merged = _merge_cycle(parts[pid], parts[qid], u, v)
            arr = np.asarray(merged, dtype=float)
            if _is_convex(arr):
                # merges that straighten a corner tend to block neighbours,
                # so prefer ones keeping all corners strictly convex
                candidates.append((_has_collinear(arr), (u, v), pid, qid, merged))
        if candidates:
            _, _, pid, qid, merged = min(candidates, key=lambda c: (c[0], c[1]))
            new_id = max(parts) + 1
            del parts[pid], parts[qid]
            parts[new_id] = merged
            changed = True
    return list(parts.values())


def _decompose_vertices(p: Polygon) -> list[np.ndarray]:
    if _is_convex(p.vertices):
        return [p.vertices]
    tri_collection = shapely.constrained_delaunay_triangles(p.shapely())
    triangles = []
    for tri in tri_collection.geoms:
        coords = np.asarray(tri.exterior.coords)[:-1]
        if _signed(coords) < 0:
            coords = coords[::-1]
        triangles.append([tuple(c) for c in coords])
    merged = _hertel_mehlhorn(triangles)
    return [np.asarray(cyc, dtype=float) for cyc in merged]


def _signed(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def convex_decompose(p: Polygon) -> ConvexDecomposition:
    """Split a simple polygon into pairwise interior-disjoint convex parts.

    Convex input comes back as a single part.  The result is cached on the
    polygon (polygons are immutable).
    """
    if p._convex_parts is None:
        parts = tuple(Polygon(v) for v in _decompose_vertices(p))
        p._convex_parts = ConvexDecomposition(parts=parts)
    return p._convex_parts


def _convex_part_arrays(p: Polygon) -> list[np.ndarray]:
    return [part.vertices for part in convex_decompose(p).parts]


def _axes_of(vertices: np.ndarray) -> np.ndarray:
    edges = np.roll(vertices, -1, axis=0) - vertices
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
    lengths = np.hypot(normals[:, 0], normals[:, 1])
    return normals / lengths[:, None]


def _sat_mtv_arrays(va: np.ndarray, vb: np.ndarray) -> np.ndarray | None:
    """MTV moving `va` out of `vb`, or None when interior-disjoint."""
    axes = np.concatenate([_axes_of(va), _axes_of(vb)], axis=0)
    proj_a = va @ axes.T  # (ma, naxes)
    proj_b = vb @ axes.T
    lo = np.maximum(proj_a.min(axis=0), proj_b.min(axis=0))
    hi = np.minimum(proj_a.max(axis=0), proj_b.max(axis=0))
    overlap = hi - lo
    if np.any(overlap <= CONTACT_TOL):
        return None
    cdiff = va.mean(axis=0) - vb.mean(axis=0)
    sign_dot = axes @ cdiff
    # push A along the axis direction that points from B toward A
    directions = np.where(sign_dot[:, None] >= 0.0, axes, -axes)
    dots = np.abs(sign_dot)
    best = 0
    for k in range(1, len(axes)):
        if overlap[k] < overlap[best] - 1e-12:
            best = k
        elif overlap[k] <= overlap[best] + 1e-12:
            # equal depth: prefer the axis better aligned with the centroid gap,
            # then +x, then +y, for determinism
            key_k = (dots[k], directions[k, 0], directions[k, 1])
            key_b = (dots[best], directions[best, 0], directions[best, 1])
            if key_k > key_b:
                best = k
    direction = directions[best]
    if abs(sign_dot[best]) < 1e-12 and direction[0] < 0:
        direction = -direction  # coincident centroids: resolve toward +x
    return direction * overlap[best]


def sat_mtv(a: Polygon, b: Polygon) -> SeparationVector | None:
    """Minimal translation of convex `a` achieving interior-disjointness from `b`.

    Returns None when the interiors are already disjoint (touching within
    the contact tolerance counts as disjoint).
    """
    if not _is_convex(a.vertices) or not _is_convex(b.vertices):
        raise GeometryError("sat_mtv requires convex operands")
    mtv = _sat_mtv_arrays(a.vertices, b.vertices)
    if mtv is None:
        return None
    return SeparationVector(float(mtv[0]), float(mtv[1]), float(np.hypot(*mtv)))


def _bbox(v: np.ndarray) -> tuple[float, float, float, float]:
    return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()


def _bbox_overlap(b1, b2, tol: float = CONTACT_TOL) -> bool:
    return (
        b1[0] <= b2[2] - tol
        and b2[0] <= b1[2] - tol
        and b1[1] <= b2[3] - tol
        and b2[1] <= b1[3] - tol
    )


def _transform_arrays(parts: list[np.ndarray], pose: Pose) -> list[np.ndarray]:
    c, s = pose.cos_t, pose.sin_t
    rot = np.array([[c, s], [-s, c]])  # right-multiplication form of R^T
    t = np.array([pose.tx, pose.ty])
    return [v @ rot + t for v in parts]


def _aggregate_mtvs(parts_a: list[np.ndarray], parts_b: list[np.ndarray]) -> SeparationVector:
    total = np.zeros(2)
    deepest = 0.0
    deepest_mtv = None
    for va in parts_a:
        ba = _bbox(va)
        for vb in parts_b:
            if not _bbox_overlap(ba, _bbox(vb)):
                continue
            mtv = _sat_mtv_arrays(va, vb)
            if mtv is None:
                continue
            total += mtv
            depth = float(np.hypot(*mtv))
            if depth > deepest:
                deepest = depth
                deepest_mtv = mtv
    if deepest == 0.0:
        return SeparationVector.ZERO
    mag = float(np.hypot(*total))
    if mag < 1e-12:
        # opposing contacts cancelled; fall back to the deepest single pair
        total = deepest_mtv
        mag = deepest
    elif mag > deepest:
        total = total * (deepest / mag)
        mag = deepest
    return SeparationVector(float(total[0]), float(total[1]), mag)


def separation_vector(p_i: Polygon, a_i: Pose, p_j: Polygon, a_j: Pose) -> SeparationVector:
    """Translation moving polygon i (at pose a_i) out of overlap with polygon j.

    Convex operands reduce to a single SAT query; non-convex ones aggregate
    over overlapping convex-part pairs (sum capped at the deepest pair).
    """
    parts_i = _transform_arrays(_convex_part_arrays(p_i), a_i)
    parts_j = _transform_arrays(_convex_part_arrays(p_j), a_j)
    bi = _bbox(np.concatenate(parts_i))
    bj = _bbox(np.concatenate(parts_j))
    if not _bbox_overlap(bi, bj):
        return SeparationVector.ZERO
    return _aggregate_mtvs(parts_i, parts_j)


# --- boundary offsets -------------------------------------------------------

_band_cache: dict[int, tuple[Polygon, float, list[np.ndarray]]] = {}


def _exterior_band_parts(boundary: Polygon, margin: float) -> list[np.ndarray]:
    """Convex pieces covering a band around the outside of the boundary."""
    cached = _band_cache.get(id(boundary))
    if cached is not None and cached[0] is boundary and cached[1] >= margin:
        return cached[2]
    x0, y0, x1, y1 = boundary.bounds
    box = shapely.box(x0 - margin, y0 - margin, x1 + margin, y1 + margin)
    band = box.difference(boundary.shapely())
    tris = shapely.constrained_delaunay_triangles(band)
    parts = []
    for tri in tris.geoms:
        coords = np.asarray(tri.exterior.coords)[:-1]
        if _signed(coords) < 0:
            coords = coords[::-1]
        parts.append(coords)
    _band_cache[id(boundary)] = (boundary, margin, parts)
    if len(_band_cache) > 64:
        _band_cache.pop(next(iter(_band_cache)))
    return parts


def boundary_offset(p: Polygon, a: Pose, container: Container) -> np.ndarray:
    """Translation pulling the transformed polygon back inside the container.

    Zero when already inside.  Strips clamp per axis (y into [0, height],
    x >= 0); polygonal boundaries take an aggregated MTV against a convex
    decomposition of the exterior band.
    """
    verts = transformed_vertices(p, a)
    if isinstance(container, Strip):
        x0, y0, x1, y1 = _bbox(verts)
        dx = -x0 if x0 < -CONTACT_TOL else 0.0
        dy = 0.0
        if y0 < -CONTACT_TOL:
            dy += -y0
        if y1 > container.height + CONTACT_TOL:
            dy += container.height - y1
        return np.array([dx, dy])

    boundary = container.polygon
    placed = ShapelyPolygon(verts)
    if placed.difference(boundary.shapely()).area <= CONTACT_TOL * max(placed.area, 1.0):
        return np.zeros(2)
    x0, y0, x1, y1 = _bbox(verts)
    margin = max(x1 - x0, y1 - y0) * 2.0 + CONTACT_TOL
    bx0, by0, bx1, by1 = boundary.bounds
    # widen until the band box fully covers the polygon
    while not (
        x0 >= bx0 - margin and y0 >= by0 - margin and x1 <= bx1 + margin and y1 <= by1 + margin
    ):
        margin *= 2.0
    band_parts = _exterior_band_parts(boundary, margin)
    parts_p = _transform_arrays(_convex_part_arrays(p), a)
    vec = _aggregate_mtvs(parts_p, band_parts)
    return vec.as_array()


# --- overlap metrics --------------------------------------------------------


@dataclass
class OverlapReport:
    total: float
    pct_of_total_area: float
    pairs: dict[tuple[int, int], float]


def overlap_area(inst: PackingInstance) -> OverlapReport:
    """Total pairwise intersection area plus a per-pair table.

    `pct_of_total_area` expresses the total as a percentage of the summed
    polygon areas.
    """
    placed = inst.transformed_all()
    geoms = [snapped(q.shapely()) for q in placed]
    boxes = [_bbox(q.vertices) for q in placed]
    pairs: dict[tuple[int, int], float] = {}
    total = 0.0
    n = len(placed)
    for i in range(n):
        for j in range(i + 1, n):
            if not _bbox_overlap(boxes[i], boxes[j]):
                continue
            inter = geoms[i].intersection(geoms[j]).area
            if inter > 0.0:
                pairs[(i, j)] = inter
                total += inter
    area_sum = sum(q.area for q in placed)
    return OverlapReport(
        total=total,
        pct_of_total_area=100.0 * total / area_sum,
        pairs=pairs,
    )
