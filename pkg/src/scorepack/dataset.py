"""Puzzle dataset generation, instance (de)serialization, and metrics.

Puzzles are produced by recursively cutting a boundary polygon with random
chords until the requested fragment count is reached, which yields packing
instances with a known 100%-utilization ground truth.  The module also
owns the JSON instance schema and the evaluation metrics that are not
strip-specific (IoU, feasibility).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np
import shapely
from shapely.geometry import LineString
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.ops import split as shapely_split

from .collision import overlap_area
from .geometry import (
    Boundary,
    Container,
    GeometryError,
    PackingInstance,
    Polygon,
    Pose,
    Strip,
    polygon_inside,
    snapped,
    union_area,
)

__all__ = [
    "PuzzleSpec",
    "GroundTruth",
    "GenerationFailed",
    "InstanceFormatError",
    "FeasibilityReport",
    "generate_puzzle",
    "iou",
    "feasibility",
    "save_instance",
    "load_instance",
    "instance_to_dict",
    "instance_from_dict",
    "iter_jsonl",
    "write_jsonl",
    "strip_instance",
    "scrambled_poses",
    "arbitrary_boundary",
]

SCHEMA_VERSION = 1


class GenerationFailed(RuntimeError):
    """Raised when the cut retry budget is exhausted for a puzzle."""


class InstanceFormatError(ValueError):
    """Malformed instance JSON; `field` names the offending entry."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field = field_name


@dataclass(frozen=True)
class PuzzleSpec:
    boundary: Polygon
    fragments: int = 16
    min_fragment_area_frac: float = 0.02
    rng_seed: int = 0
    max_cut_attempts: int = 50

    def __post_init__(self) -> None:
        if self.fragments < 2:
            raise ValueError("need at least 2 fragments")

    @staticmethod
    def square(side: float = 2000.0, fragments: int = 16, rng_seed: int = 0, **kw) -> "PuzzleSpec":
        boundary = Polygon([(0, 0), (side, 0), (side, side), (0, side)])
        return PuzzleSpec(boundary=boundary, fragments=fragments, rng_seed=rng_seed, **kw)


@dataclass
class GroundTruth:
    """Fragments at their exact reconstruction poses (utilization 1)."""

    instance: PackingInstance

    @property
    def utilization(self) -> float:
        return 1.0


def _random_chord(ring, rng: np.random.Generator) -> LineString:
    total = ring.length
    s1, s2 = rng.uniform(0.0, total, size=2)
    p1 = ring.interpolate(s1)
    p2 = ring.interpolate(s2)
    if p1.distance(p2) < 1e-9 * total:
        raise ValueError("degenerate chord")
    # extend slightly beyond both endpoints so the split is robust
    dx, dy = p2.x - p1.x, p2.y - p1.y
    norm = math.hypot(dx, dy)
    ext = 1e-6 * total / norm
    return LineString(
        [(p1.x - dx * ext, p1.y - dy * ext), (p2.x + dx * ext, p2.y + dy * ext)]
    )


def _cut_piece(
    piece: ShapelyPolygon, min_area: float, attempts: int, rng: np.random.Generator
) -> tuple[ShapelyPolygon, ShapelyPolygon] | None:
    for _ in range(attempts):
        try:
            chord = _random_chord(piece.exterior, rng)
        except ValueError:
            continue
        try:
            parts = shapely_split(piece, chord)
        except Exception:
            continue
        geoms = [g for g in parts.geoms if isinstance(g, ShapelyPolygon)]
        if len(geoms) != 2:
            continue
        if any(g.area < min_area or not g.is_valid for g in geoms):
            continue
        try:
            for g in geoms:
                Polygon(np.asarray(g.exterior.coords)[:-1])
        except GeometryError:
            continue
        return geoms[0], geoms[1]
    return None


def generate_puzzle(spec: PuzzleSpec) -> tuple[list[Polygon], GroundTruth]:
    """Randomly divide the boundary into `spec.fragments` simple pieces.

    Cuts always target the largest remaining piece.  Returned fragments are
    recentered to their centroids; the ground truth keeps the poses that
    reassemble the boundary exactly.
    """
    rng = np.random.default_rng(spec.rng_seed)
    min_area = spec.min_fragment_area_frac * spec.boundary.area
    pieces: list[ShapelyPolygon] = [spec.boundary.shapely()]
    while len(pieces) < spec.fragments:
        pieces.sort(key=lambda g: g.area, reverse=True)
        target = pieces.pop(0)
        cut = _cut_piece(target, min_area, spec.max_cut_attempts, rng)
        if cut is None:
            raise GenerationFailed(
                f"no valid chord for piece of area {target.area:.3g} after "
                f"{spec.max_cut_attempts} attempts (seed {spec.rng_seed})"
            )
        pieces.extend(cut)

    fragments: list[Polygon] = []
    poses: list[Pose] = []
    for g in pieces:
        poly = Polygon(np.asarray(g.exterior.coords)[:-1])
        local, centroid = poly.centered()
        fragments.append(local)
        poses.append(Pose(float(centroid[0]), float(centroid[1]), 1.0, 0.0))
    instance = PackingInstance(fragments, Boundary(spec.boundary), poses)
    return fragments, GroundTruth(instance=instance)


def scrambled_poses(gt: GroundTruth, rng: np.random.Generator) -> list[Pose]:
    """Random presentation poses: uniform rotations, translations shuffled
    inside the boundary bounding box."""
    x0, y0, x1, y1 = gt.instance.container.polygon.bounds
    out = []
    for _ in gt.instance.polygons:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        tx = rng.uniform(x0, x1)
        ty = rng.uniform(y0, y1)
        out.append(Pose.from_angle(tx, ty, angle))
    return out


def strip_instance(gt: GroundTruth, height: float | None = None) -> PackingInstance:
    """Reinterpret a puzzle ground truth as a strip packing.

    By default the strip height equals the boundary bbox height (utilization
    1 for a rectangular boundary).  A larger `height` centers the
    reconstruction vertically, leaving headroom; poses shift so the
    boundary's min-x sits at the origin.
    """
    bpoly = gt.instance.container.polygon
    x0, y0, x1, y1 = bpoly.bounds
    if height is None:
        height = y1 - y0
    if height < y1 - y0 - 1e-9:
        raise GeometryError("strip height smaller than the puzzle boundary")
    dy = (height - (y1 - y0)) / 2.0
    strip = Strip(height=height)
    poses = [
        Pose(p.tx - x0, p.ty - y0 + dy, p.cos_t, p.sin_t) for p in gt.instance.poses
    ]
    return PackingInstance(list(gt.instance.polygons), strip, poses)


def arbitrary_boundary(
    side: float, rng_seed: int, fragments: int = 16
) -> Polygon:
    """Draw an irregular boundary: a fragment of a square puzzle, rescaled
    so its area matches half the source square."""
    spec = PuzzleSpec.square(side=side, fragments=fragments, rng_seed=rng_seed)
    frags, _ = generate_puzzle(spec)
    rng = np.random.default_rng(rng_seed + 1)
    big = [f for f in frags if f.area >= 0.04 * side * side] or frags
    pick = big[int(rng.integers(len(big)))]
    scale = math.sqrt(0.5 * side * side / pick.area)
    verts = pick.vertices * scale
    verts = verts - verts.min(axis=0)
    return Polygon(verts)


# --- metrics ----------------------------------------------------------------


def iou(inst: PackingInstance) -> float:
    """Intersection-over-union of the placed-polygon union with the boundary."""
    if not isinstance(inst.container, Boundary):
        raise GeometryError("iou is defined for boundary containers only")
    b = snapped(inst.container.polygon.shapely())
    u = shapely.unary_union([snapped(p.shapely()) for p in inst.transformed_all()])
    inter = b.intersection(u).area
    union = b.union(u).area
    return inter / union


@dataclass
class FeasibilityReport:
    feasible: bool
    total_overlap: float
    overlap_tol: float
    outside: list[int]


def feasibility(inst: PackingInstance, tol: float | None = None) -> FeasibilityReport:
    """True iff total pairwise overlap <= tol and every polygon is inside.

    Default tolerance: 1e-9 of the summed polygon areas.  The comparison
    is inclusive (overlap exactly at tol passes).
    """
    if tol is None:
        tol = 1e-9 * sum(p.area for p in inst.polygons)
    total = overlap_area(inst).total
    outside = [
        i
        for i in range(len(inst))
        if not polygon_inside(inst.transformed(i), inst.container)
    ]
    return FeasibilityReport(
        feasible=(total <= tol and not outside),
        total_overlap=total,
        overlap_tol=tol,
        outside=outside,
    )


# --- serialization ----------------------------------------------------------


def instance_to_dict(inst: PackingInstance, meta: dict | None = None) -> dict:
    if isinstance(inst.container, Strip):
        container = {"kind": "strip", "height": inst.container.height}
    else:
        container = {
            "kind": "boundary",
            "polygon": inst.container.polygon.vertices.tolist(),
        }
    return {
        "version": SCHEMA_VERSION,
        "container": container,
        "polygons": [p.vertices.tolist() for p in inst.polygons],
        "poses": [[a.tx, a.ty, a.cos_t, a.sin_t] for a in inst.poses],
        "meta": meta or {},
    }


def _require(d: dict, key: str, ctx: str) -> object:
    if key not in d:
        raise InstanceFormatError(f"missing field '{key}' in {ctx}", key)
    return d[key]


def instance_from_dict(d: dict) -> PackingInstance:
    if not isinstance(d, dict):
        raise InstanceFormatError("instance record must be an object", None)
    version = _require(d, "version", "instance")
    if version != SCHEMA_VERSION:
        raise InstanceFormatError(f"unsupported schema version {version}", "version")
    cont = _require(d, "container", "instance")
    kind = _require(cont, "kind", "container")
    if kind == "strip":
        container: Container = Strip(height=float(_require(cont, "height", "container")))
    elif kind == "boundary":
        container = Boundary(Polygon(_require(cont, "polygon", "container")))
    else:
        raise InstanceFormatError(f"unknown container kind '{kind}'", "container.kind")
    polys_raw = _require(d, "polygons", "instance")
    poses_raw = _require(d, "poses", "instance")
    try:
        polygons = [Polygon(v) for v in polys_raw]
    except GeometryError as e:
        raise InstanceFormatError(f"bad polygon: {e}", "polygons") from e
    try:
        poses = [Pose(*map(float, row)) for row in poses_raw]
    except (TypeError, GeometryError) as e:
        raise InstanceFormatError(f"bad pose: {e}", "poses") from e
    if len(polygons) != len(poses):
        raise InstanceFormatError(
            f"{len(polygons)} polygons but {len(poses)} poses", "poses"
        )
    return PackingInstance(polygons, container, poses)


def save_instance(path_or_fp, inst: PackingInstance, meta: dict | None = None) -> None:
    doc = instance_to_dict(inst, meta)
    if hasattr(path_or_fp, "write"):
        json.dump(doc, path_or_fp)
    else:
        with open(path_or_fp, "w") as fp:
            json.dump(doc, fp)


def load_instance(path_or_fp) -> PackingInstance:
    if hasattr(path_or_fp, "read"):
        doc = json.load(path_or_fp)
    else:
        with open(path_or_fp) as fp:
            doc = json.load(fp)
    return instance_from_dict(doc)


def write_jsonl(path: str, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w") as fp:
        for rec in records:
            fp.write(json.dumps(rec))
            fp.write("\n")
            n += 1
    return n


def iter_jsonl(path: str) -> Iterator[dict]:
    """Stream records one line at a time (no full-file buffering)."""
    with open(path) as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise InstanceFormatError(
                    f"line {lineno}: invalid JSON ({e.msg})", f"line {lineno}"
                ) from e
