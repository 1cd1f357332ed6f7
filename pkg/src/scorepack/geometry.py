"""Planar polygon primitives, SE(2) poses, and packing-instance metrics.

Everything downstream (collision handling, the teacher packer, the
diffusion sampler) works on the types defined here.  Polygons are simple
closed contours normalized to counter-clockwise winding; poses are rigid
transforms stored as (tx, ty, cos, sin).  Boolean area computations
(union / intersection) are delegated to shapely's robust clipper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon as ShapelyPolygon

__all__ = [
    "Point",
    "Polygon",
    "Pose",
    "Strip",
    "Boundary",
    "Container",
    "PackingInstance",
    "ContourGraph",
    "GeometryError",
    "area",
    "internal_angles",
    "apply_pose",
    "contour_graph",
    "utilization",
    "utilization_report",
    "union_area",
    "transformed_vertices",
]

# Vertices closer than this are welded during construction / booleans.
WELD_TOL = 1e-9


class GeometryError(ValueError):
    """Raised when input violates a polygon or pose invariant."""


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")


def _signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _is_simple(vertices: np.ndarray) -> bool:
    # Shapely treats self-touching rings as non-simple too, which matches
    # the contract here (strictly simple contours only).
    ring = ShapelyPolygon(vertices)
    return ring.is_valid


class Polygon:
    """Simple closed contour with ordered CCW vertices.

    Construction validates the invariants: at least 3 vertices, finite
    coordinates, consecutive vertices distinct, no self-intersection.
    CW input is reversed to CCW.  Instances are treated as immutable.
    """

    __slots__ = ("vertices", "_area", "_centroid", "_shapely", "_convex_parts")

    def __init__(self, vertices: Sequence | np.ndarray):
        arr = np.asarray(vertices, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise GeometryError(f"expected (m, 2) vertex array, got {arr.shape}")
        if arr.shape[0] < 3:
            raise GeometryError(f"polygon needs >= 3 vertices, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise GeometryError("non-finite vertex coordinate")
        diffs = arr - np.roll(arr, -1, axis=0)
        if np.any(np.hypot(diffs[:, 0], diffs[:, 1]) <= WELD_TOL):
            raise GeometryError("consecutive vertices coincide")
        signed = _signed_area(arr)
        if abs(signed) <= WELD_TOL:
            raise GeometryError("degenerate polygon (zero area)")
        if signed < 0.0:
            arr = arr[::-1].copy()
            signed = -signed
        if not _is_simple(arr):
            raise GeometryError("polygon contour self-intersects")
        arr.setflags(write=False)
        self.vertices = arr
        self._area = signed
        self._centroid = None
        self._shapely = None
        self._convex_parts = None  # filled lazily by collision.convex_decompose

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def __repr__(self) -> str:
        return f"Polygon({len(self)} vertices, area={self._area:.6g})"

    @property
    def area(self) -> float:
        return self._area

    @property
    def centroid(self) -> np.ndarray:
        """Area centroid (not the vertex mean)."""
        if self._centroid is None:
            v = self.vertices
            nxt = np.roll(v, -1, axis=0)
            cross = v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1]
            c = (v + nxt) * cross[:, None]
            self._centroid = c.sum(axis=0) / (6.0 * self._area)
        return self._centroid

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        v = self.vertices
        return (
            float(v[:, 0].min()),
            float(v[:, 1].min()),
            float(v[:, 0].max()),
            float(v[:, 1].max()),
        )

    def shapely(self) -> ShapelyPolygon:
        if self._shapely is None:
            self._shapely = ShapelyPolygon(self.vertices)
        return self._shapely

    def centered(self) -> tuple["Polygon", np.ndarray]:
        """Return (copy recentered to its centroid, original centroid)."""
        c = self.centroid
        return Polygon(self.vertices - c), c.copy()

    def translated(self, dx: float, dy: float) -> "Polygon":
        return Polygon(self.vertices + np.array([dx, dy]))

    def rotated(self, angle: float) -> "Polygon":
        """Rotate about the local origin by `angle` radians."""
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        return Polygon(self.vertices @ rot.T)

    @staticmethod
    def rectangle(width: float, height: float, center: tuple[float, float] = (0.0, 0.0)) -> "Polygon":
        cx, cy = center
        hw, hh = width / 2.0, height / 2.0
        return Polygon(
            [(cx - hw, cy - hh), (cx + hw, cy - hh), (cx + hw, cy + hh), (cx - hw, cy + hh)]
        )


@dataclass(frozen=True)
class Pose:
    """SE(2) placement: rotate about the polygon's local origin, then translate."""

    tx: float
    ty: float
    cos_t: float
    sin_t: float

    def __post_init__(self) -> None:
        for v in (self.tx, self.ty, self.cos_t, self.sin_t):
            if not math.isfinite(v):
                raise GeometryError("non-finite pose component")
        norm = math.hypot(self.cos_t, self.sin_t)
        if abs(norm - 1.0) > 1e-9:
            raise GeometryError(f"pose rotation not unit-norm (|c,s| = {norm})")

    @staticmethod
    def identity() -> "Pose":
        return Pose(0.0, 0.0, 1.0, 0.0)

    @staticmethod
    def from_angle(tx: float, ty: float, angle: float) -> "Pose":
        return Pose(tx, ty, math.cos(angle), math.sin(angle))

    @staticmethod
    def from_raw(tx: float, ty: float, c: float, s: float) -> "Pose":
        """Project an unnormalized (c, s) onto the unit circle."""
        norm = math.hypot(c, s)
        if norm < 1e-12:
            c, s = 1.0, 0.0
        else:
            c, s = c / norm, s / norm
        return Pose(tx, ty, c, s)

    @property
    def angle(self) -> float:
        return math.atan2(self.sin_t, self.cos_t)

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.cos_t, self.sin_t])


@dataclass(frozen=True)
class Strip:
    """Horizontal strip container: y in [0, height], x >= 0, open to the right."""

    height: float
    length: float = 0.0  # current occupied length; informational

    def __post_init__(self) -> None:
        if not (self.height > 0.0):
            raise GeometryError(f"strip height must be positive, got {self.height}")


@dataclass(frozen=True)
class Boundary:
    """Closed polygonal container."""

    polygon: Polygon


Container = Strip | Boundary


def container_height(container: Container) -> float:
    """Characteristic scale used to normalize network-facing features."""
    if isinstance(container, Strip):
        return container.height
    x0, y0, x1, y1 = container.polygon.bounds
    return max(x1 - x0, y1 - y0)


@dataclass
class PackingInstance:
    """A polygon set, its container, and one pose per polygon."""

    polygons: list[Polygon]
    container: Container
    poses: list[Pose]

    def __post_init__(self) -> None:
        if len(self.polygons) != len(self.poses):
            raise GeometryError(
                f"{len(self.polygons)} polygons but {len(self.poses)} poses"
            )
        if not self.polygons:
            raise GeometryError("empty instance")

    def __len__(self) -> int:
        return len(self.polygons)

    def transformed(self, i: int) -> Polygon:
        return apply_pose(self.polygons[i], self.poses[i])

    def transformed_all(self) -> list[Polygon]:
        return [self.transformed(i) for i in range(len(self))]

    def with_poses(self, poses: Sequence[Pose]) -> "PackingInstance":
        return PackingInstance(self.polygons, self.container, list(poses))

    def copy(self) -> "PackingInstance":
        return PackingInstance(list(self.polygons), self.container, list(self.poses))


@dataclass
class ContourGraph:
    """Cycle graph over a polygon contour with (x, y, angle) node features."""

    nodes: np.ndarray  # (m,) vertex indices
    edges: np.ndarray  # (m, 2) pairs (i, i+1 mod m)
    features: np.ndarray  # (m, 3): x, y, internal angle

    def __len__(self) -> int:
        return len(self.nodes)


# ---------------------------------------------------------------------------
# Operations


def area(p: Polygon) -> float:
    """Positive area of the polygon (shoelace; cached at construction)."""
    return p.area


def internal_angles(p: Polygon) -> np.ndarray:
    """Internal angle at each vertex, in (0, 2*pi).

    For a simple CCW contour the turn angles satisfy
    sum(pi - alpha_i) == 2*pi.
    """
    v = p.vertices
    incoming = v - np.roll(v, 1, axis=0)
    outgoing = np.roll(v, -1, axis=0) - v
    cross = incoming[:, 0] * outgoing[:, 1] - incoming[:, 1] * outgoing[:, 0]
    dot = np.einsum("ij,ij->i", incoming, outgoing)
    turn = np.arctan2(cross, dot)
    return np.pi - turn


def apply_pose(p: Polygon, pose: Pose) -> Polygon:
    """Rigid transform: rotate about the local origin, then translate."""
    c, s = pose.cos_t, pose.sin_t
    rot = np.array([[c, -s], [s, c]])
    return Polygon(p.vertices @ rot.T + np.array([pose.tx, pose.ty]))


def transformed_vertices(p: Polygon, pose: Pose) -> np.ndarray:
    """Like apply_pose but returns the raw vertex array (no revalidation)."""
    c, s = pose.cos_t, pose.sin_t
    rot = np.array([[c, -s], [s, c]])
    return p.vertices @ rot.T + np.array([pose.tx, pose.ty])


def contour_graph(p: Polygon, scale: float = 1.0) -> ContourGraph:
    """Cycle graph with node features (x/scale, y/scale, internal angle).

    `scale` is the container height when the graph feeds the score network;
    geometry itself stays in raw model units.
    """
    m = len(p)
    nodes = np.arange(m)
    edges = np.stack([nodes, (nodes + 1) % m], axis=1)
    feats = np.concatenate(
        [p.vertices / scale, internal_angles(p)[:, None]], axis=1
    )
    return ContourGraph(nodes=nodes, edges=edges, features=feats)


def snapped(geom):
    """Weld vertices to a 1e-9 grid before boolean ops.

    GEOS overlays can misbehave on rings that share an edge only to within
    a few ulps (as puzzle fragments do); snapping to the weld tolerance
    keeps unions/intersections robust.
    """
    return shapely.set_precision(geom, WELD_TOL)


def union_area(polygons: Sequence[Polygon]) -> float:
    """Area of the boolean union of the polygons (vertices welded at 1e-9)."""
    geoms = [snapped(q.shapely()) for q in polygons]
    return float(shapely.unary_union(geoms).area)


def _container_region(container: Container, occupied_length: float) -> ShapelyPolygon:
    if isinstance(container, Strip):
        return shapely.box(0.0, 0.0, max(occupied_length, WELD_TOL), container.height)
    return container.polygon.shapely()


def container_area(container: Container, occupied_length: float = 0.0) -> float:
    if isinstance(container, Strip):
        return container.height * max(occupied_length, WELD_TOL)
    return container.polygon.area


def occupied_length(inst: PackingInstance) -> float:
    """Maximum transformed x coordinate over all polygons (strip length)."""
    return max(
        float(transformed_vertices(p, a)[:, 0].max())
        for p, a in zip(inst.polygons, inst.poses)
    )


def utilization(inst: PackingInstance) -> float:
    """Union area of placed polygons over the container area.

    Strip containers use height x occupied length (max transformed x) as
    the denominator.  The union is an exact polygon boolean, so overlap
    never double-counts.
    """
    return utilization_report(inst)[0]


def utilization_report(inst: PackingInstance) -> tuple[float, bool]:
    """(utilization, inside_ok); inside_ok is False if any vertex exits B."""
    placed = inst.transformed_all()
    u_area = union_area(placed)
    if isinstance(inst.container, Strip):
        occ = occupied_length(inst)
        denom = container_area(inst.container, occ)
        inside = all(_inside_strip(p, inst.container) for p in placed)
    else:
        denom = container_area(inst.container)
        region = inst.container.polygon.shapely()
        inside = all(_inside_boundary(p, region) for p in placed)
    return u_area / denom, inside


# Contact tolerance: touching within this distance counts as inside/disjoint.
CONTACT_TOL = 1e-7


def _inside_strip(p: Polygon, strip: Strip) -> bool:
    x0, y0, x1, y1 = p.bounds
    return x0 >= -CONTACT_TOL and y0 >= -CONTACT_TOL and y1 <= strip.height + CONTACT_TOL


def _inside_boundary(p: Polygon, region: ShapelyPolygon) -> bool:
    diff = snapped(p.shapely()).difference(snapped(region))
    return diff.area <= CONTACT_TOL * max(p.area, 1.0)


def polygon_inside(p: Polygon, container: Container) -> bool:
    """Transformed-polygon containment test with the contact tolerance."""
    if isinstance(container, Strip):
        return _inside_strip(p, container)
    return _inside_boundary(p, container.polygon.shapely())
