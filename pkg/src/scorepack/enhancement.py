"""Post-processing that lifts utilization of a near-feasible layout.

Two stages: iterative area-weighted displacement resolves minor overlaps
and boundary violations (translations only, rotations are frozen), then a
per-polygon binary-search slide toward -x and -y closes gaps on strip
containers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collision import (
    _bbox,
    _bbox_overlap,
    boundary_offset,
    overlap_area,
    separation_vector,
)
from .geometry import (
    CONTACT_TOL,
    GeometryError,
    PackingInstance,
    Pose,
    Strip,
    polygon_inside,
    transformed_vertices,
)

__all__ = [
    "EnhanceConfig",
    "EnhanceReport",
    "displacement_step",
    "resolve_overlaps",
    "eliminate_gaps",
    "enhance",
]


@dataclass(frozen=True)
class EnhanceConfig:
    max_iters: int = 100
    overlap_tol_rel: float = 1e-9  # of total polygon area
    gap_search_eps: float = 1e-4
    step_damping: float = 1.0
    repeats: int = 1  # overlap-resolution + gap-elimination passes

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.overlap_tol_rel <= 0 or self.gap_search_eps <= 0:
            raise ValueError("tolerances must be positive")
        if not (0.0 < self.step_damping <= 1.0):
            raise ValueError("step_damping must lie in (0, 1]")


@dataclass
class EnhanceReport:
    iterations: int = 0
    final_overlap: float = 0.0
    feasible: bool = False
    converged: bool = False
    gap_passes: int = 0
    utilization_before: float | None = None
    utilization_after: float | None = None

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_overlap": self.final_overlap,
            "feasible": self.feasible,
            "converged": self.converged,
            "gap_passes": self.gap_passes,
            "utilization_before": self.utilization_before,
            "utilization_after": self.utilization_after,
        }


def displacement_step(inst: PackingInstance) -> np.ndarray:
    """Per-polygon displacement resolving overlaps and boundary violations.

    For each ordered pair i < j with separation vector v (moving i away
    from j), polygon i receives S_j * v / (S_i + S_j) and polygon j the
    opposite share S_i * v / (S_i + S_j); each polygon also receives its
    own boundary offset.  Pure function: poses are not mutated.
    """
    n = len(inst)
    disp = np.zeros((n, 2))
    areas = [p.area for p in inst.polygons]
    boxes = [
        _bbox(transformed_vertices(p, a)) for p, a in zip(inst.polygons, inst.poses)
    ]
    for i in range(n):
        for j in range(i + 1, n):
            if not _bbox_overlap(boxes[i], boxes[j]):
                continue
            v = separation_vector(
                inst.polygons[i], inst.poses[i], inst.polygons[j], inst.poses[j]
            )
            if v.depth == 0.0:
                continue
            vec = v.as_array()
            denom = areas[i] + areas[j]
            disp[i] += (areas[j] / denom) * vec
            disp[j] -= (areas[i] / denom) * vec
    for i in range(n):
        disp[i] += boundary_offset(inst.polygons[i], inst.poses[i], inst.container)
    return disp


def _overlap_total(inst: PackingInstance) -> float:
    return overlap_area(inst).total


def _all_inside(inst: PackingInstance) -> bool:
    return all(
        polygon_inside(inst.transformed(i), inst.container) for i in range(len(inst))
    )


def _translated_pose(pose: Pose, dx: float, dy: float) -> Pose:
    return Pose(pose.tx + dx, pose.ty + dy, pose.cos_t, pose.sin_t)


def resolve_overlaps(
    inst: PackingInstance, cfg: EnhanceConfig = EnhanceConfig()
) -> tuple[PackingInstance, EnhanceReport]:
    """Iterate displacement steps until the layout is feasible or the
    iteration limit is reached.  Rotations are untouched."""
    out = inst.copy()
    total_area = sum(p.area for p in out.polygons)
    tol = cfg.overlap_tol_rel * total_area
    report = EnhanceReport()
    for it in range(cfg.max_iters + 1):
        overlap = _overlap_total(out)
        inside = _all_inside(out)
        if overlap <= tol and inside:
            report.iterations = it
            report.final_overlap = overlap
            report.feasible = True
            report.converged = True
            return out, report
        if it == cfg.max_iters:
            break
        disp = displacement_step(out) * cfg.step_damping
        out.poses = [
            _translated_pose(pose, dx, dy) for pose, (dx, dy) in zip(out.poses, disp)
        ]
    report.iterations = cfg.max_iters
    report.final_overlap = _overlap_total(out)
    report.feasible = False
    report.converged = False
    return out, report


def _slide_free(
    inst: PackingInstance, idx: int, direction: np.ndarray, limit: float, eps: float
) -> float:
    """Largest slide of polygon idx along `direction` keeping the layout feasible.

    Assumes feasibility is monotone up to first contact (slide-to-contact
    semantics); the returned distance is always verified feasible.
    """
    if limit <= 0.0:
        return 0.0

    others = [
        (transformed_vertices(inst.polygons[j], inst.poses[j]), j)
        for j in range(len(inst))
        if j != idx
    ]
    other_boxes = [(_bbox(v), j) for v, j in others]

    height = inst.container.height

    def feasible(dist: float) -> bool:
        pose = _translated_pose(
            inst.poses[idx], direction[0] * dist, direction[1] * dist
        )
        moved = transformed_vertices(inst.polygons[idx], pose)
        box = _bbox(moved)
        if box[0] < -CONTACT_TOL or box[1] < -CONTACT_TOL or box[3] > height + CONTACT_TOL:
            return False
        for (obox, j) in other_boxes:
            if not _bbox_overlap(box, obox):
                continue
            v = separation_vector(
                inst.polygons[idx], pose, inst.polygons[j], inst.poses[j]
            )
            if v.depth > 0.0:
                return False
        return True

    if feasible(limit):
        return limit
    lo, hi = 0.0, limit
    while hi - lo > eps:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def eliminate_gaps(
    inst: PackingInstance, cfg: EnhanceConfig = EnhanceConfig()
) -> PackingInstance:
    """Compact a feasible strip layout by sliding polygons toward -x then -y.

    Polygons are processed in ascending transformed min-x (ties by min-y,
    then index); each slide distance comes from a binary search at
    precision `gap_search_eps`.  Strip length never increases.
    """
    if not isinstance(inst.container, Strip):
        raise GeometryError("gap elimination applies to strip containers only")
    out = inst.copy()

    def sort_key(i: int) -> tuple:
        x0, y0, _, _ = _bbox(transformed_vertices(out.polygons[i], out.poses[i]))
        return (x0, y0, i)

    order = sorted(range(len(out)), key=sort_key)
    for i in order:
        x0, y0, _, _ = _bbox(transformed_vertices(out.polygons[i], out.poses[i]))
        dist = _slide_free(out, i, np.array([-1.0, 0.0]), max(x0, 0.0), cfg.gap_search_eps)
        if dist > 0.0:
            out.poses[i] = _translated_pose(out.poses[i], -dist, 0.0)
        x0, y0, _, _ = _bbox(transformed_vertices(out.polygons[i], out.poses[i]))
        dist = _slide_free(out, i, np.array([0.0, -1.0]), max(y0, 0.0), cfg.gap_search_eps)
        if dist > 0.0:
            out.poses[i] = _translated_pose(out.poses[i], 0.0, -dist)
    return out


def enhance(
    inst: PackingInstance, cfg: EnhanceConfig = EnhanceConfig()
) -> tuple[PackingInstance, EnhanceReport]:
    """Overlap resolution followed by gap elimination (strip containers).

    The report aggregates both stages; a non-converged overlap stage skips
    gap elimination and flags the result infeasible.
    """
    from .geometry import utilization

    out = inst
    report = EnhanceReport()
    for _ in range(cfg.repeats):
        out, stage = resolve_overlaps(out, cfg)
        report.iterations += stage.iterations
        report.final_overlap = stage.final_overlap
        report.feasible = stage.feasible
        report.converged = stage.converged
        if not stage.feasible:
            return out, report
        if isinstance(out.container, Strip):
            if report.utilization_before is None:
                report.utilization_before = utilization(out)
            out = eliminate_gaps(out, cfg)
            report.gap_passes += 1
    report.utilization_after = utilization(out)
    return out, report
