"""NFP-based bottom-left placement wrapped in a genetic algorithm.

The teacher packs polygons into a strip by walking a placement order:
each polygon lands on the boundary of its feasible region (inner-fit
rectangle minus the union of no-fit polygons against already placed
pieces), choosing the position that keeps the strip shortest.  A small
GA searches over placement order and discrete rotation angles; the whole
search restarts several times and the best layout wins.  Corpus
generation wraps this with random polygon draws and random initial
rotations, and reports the utilization spread used to weight training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon as ShapelyPolygon

from .collision import convex_decompose
from .dataset import feasibility, instance_to_dict, write_jsonl
from .diffusion import WeightStats
from .geometry import (
    CONTACT_TOL,
    GeometryError,
    PackingInstance,
    Polygon,
    Pose,
    Strip,
    snapped,
    utilization,
)

__all__ = [
    "NoFitPolygon",
    "Chromosome",
    "TeacherConfig",
    "TeacherRecord",
    "PlacementImpossible",
    "PlacementCache",
    "nfp",
    "place_sequence",
    "evolve",
    "generate_corpus",
    "write_corpus",
]


class PlacementImpossible(RuntimeError):
    """A polygon cannot fit into the strip at any allowed angle."""


@dataclass
class NoFitPolygon:
    """Reference-point locus at which the orbiting polygon touches the fixed one.

    Placing the orbiting polygon's reference point strictly inside a loop
    means overlap; on the loop means contact.  Loops are the exterior and
    interior rings of the Minkowski sum fixed (+) reflect(orbiting).
    """

    fixed: tuple
    orbiting: tuple
    boundary: list[np.ndarray]
    _geom: object = field(repr=False, default=None)

    def forbids(self, x: float, y: float) -> bool:
        """True when the reference point at (x, y) would cause overlap."""
        return bool(self._geom.contains(shapely.Point(x, y)))


@dataclass(frozen=True)
class Chromosome:
    order: tuple[int, ...]
    angle_idx: tuple[int, ...]  # indexed by polygon id


@dataclass(frozen=True)
class TeacherConfig:
    n_angles: int = 32
    population: int = 8
    generations: int = 8
    restarts: int = 10
    mutation_rate: float = 0.1
    rng_seed: int = 0
    padding: float = 0.0

    def __post_init__(self) -> None:
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.n_angles < 1:
            raise ValueError("n_angles must be >= 1")

    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (2.0 * math.pi / self.n_angles)


@dataclass
class TeacherRecord:
    instance: PackingInstance
    utilization: float
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "instance": instance_to_dict(self.instance),
            "utilization": self.utilization,
            "provenance": self.provenance,
        }


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull vertices."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        raise GeometryError("degenerate hull input")
    idx = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[idx]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def _minkowski_convex(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sums = (a[:, None, :] + b[None, :, :]).reshape(-1, 2)
    return _convex_hull(sums)


def nfp(fixed: Polygon, orbiting: Polygon, key: tuple = (None, None)) -> NoFitPolygon:
    """No-fit polygon of `orbiting` around `fixed`, both in local frames.

    Computed as the Minkowski sum of `fixed` with the point-reflected
    orbiting polygon, via convex decomposition and a union of pairwise
    convex sums.  The reference point is the orbiting polygon's local
    origin.
    """
    parts_f = [p.vertices for p in convex_decompose(fixed).parts]
    reflected = Polygon(-orbiting.vertices)
    parts_o = [p.vertices for p in convex_decompose(reflected).parts]
    pieces = [
        snapped(ShapelyPolygon(_minkowski_convex(pf, po)))
        for pf in parts_f
        for po in parts_o
    ]
    geom = shapely.unary_union(pieces)
    loops: list[np.ndarray] = []
    geoms = geom.geoms if geom.geom_type == "MultiPolygon" else [geom]
    for g in geoms:
        loops.append(np.asarray(g.exterior.coords)[:-1])
        for ring in g.interiors:
            loops.append(np.asarray(ring.coords)[:-1])
    return NoFitPolygon(fixed=key[0], orbiting=key[1], boundary=loops, _geom=geom)


class PlacementCache:
    """Memoizes rotated polygons and NFPs across GA evaluations.

    Keys carry the polygon id and the exact rotation angle, so a cache can
    be shared by every chromosome of a run.
    """

    def __init__(self, polygons: Sequence[Polygon], padding: float = 0.0):
        self.polygons = list(polygons)
        self.padding = padding
        self._rotated: dict[tuple, Polygon] = {}
        self._nfp: dict[tuple, NoFitPolygon] = {}

    def rotated(self, pid: int, angle: float) -> Polygon:
        k = (pid, angle)
        if k not in self._rotated:
            self._rotated[k] = self.polygons[pid].rotated(angle)
        return self._rotated[k]

    def nfp_geom(self, fid: int, fangle: float, oid: int, oangle: float):
        k = (fid, fangle, oid, oangle)
        if k not in self._nfp:
            result = nfp(
                self.rotated(fid, fangle),
                self.rotated(oid, oangle),
                key=((fid, fangle), (oid, oangle)),
            )
            if self.padding > 0.0:
                result._geom = result._geom.buffer(self.padding, join_style="mitre")
            self._nfp[k] = result
        return self._nfp[k]._geom


def _quant(v: float, q: float = 1e-9) -> int:
    return int(round(v / q))


def place_sequence(
    polygons: Sequence[Polygon],
    container: Strip,
    order: Sequence[int],
    angles: Sequence[float],
    cache: PlacementCache | None = None,
) -> PackingInstance:
    """Place polygons one by one at their given rotations.

    Candidate positions are the boundary vertices of the feasible region
    (inner-fit rectangle of the strip minus the union of NFPs against the
    already placed pieces); the candidate minimizing the resulting strip
    length wins, ties broken by lower y then lower x.
    """
    if not isinstance(container, Strip):
        raise GeometryError("teacher placement targets strip containers")
    if sorted(order) != list(range(len(polygons))):
        raise ValueError("order must be a permutation of polygon indices")
    if cache is None:
        cache = PlacementCache(polygons)
    h = container.height

    rotated = {pid: cache.rotated(pid, angles[pid]) for pid in order}
    widths = {}
    for pid, rp in rotated.items():
        x0, y0, x1, y1 = rp.bounds
        if y1 - y0 > h + CONTACT_TOL:
            raise PlacementImpossible(
                f"polygon {pid} is taller than the strip at angle {angles[pid]:.4f} "
                f"({y1 - y0:.6g} > {h:.6g})"
            )
        widths[pid] = x1 - x0
    nominal = sum(widths.values()) + max(widths.values())

    poses: dict[int, Pose] = {}
    placed: list[int] = []
    max_x = 0.0
    for pid in order:
        rp = rotated[pid]
        bx0, by0, bx1, by1 = rp.bounds
        pad = cache.padding
        ix0, ix1 = -bx0, nominal - bx1
        iy0, iy1 = -by0 + pad, h - by1 - pad
        if iy1 < iy0 - CONTACT_TOL:
            raise PlacementImpossible(f"polygon {pid} cannot fit the padded strip")
        iy1 = max(iy1, iy0)
        corners = [(ix0, iy0), (ix1, iy0), (ix1, iy1), (ix0, iy1)]
        if not placed:
            candidates = corners
            forbidden = None
        else:
            nfp_geoms = [
                shapely.affinity.translate(
                    cache.nfp_geom(fid, angles[fid], pid, angles[pid]),
                    xoff=poses[fid].tx,
                    yoff=poses[fid].ty,
                )
                for fid in placed
            ]
            # candidates: NFP loop vertices, loop/loop and loop/IFR
            # intersections, and the inner-fit rectangle corners
            points: list[tuple[float, float]] = list(corners)
            boundaries = [g.boundary for g in nfp_geoms]
            for g in nfp_geoms:
                points.extend(map(tuple, shapely.get_coordinates(g)))
            ifr_ring = shapely.LineString(corners + corners[:1])
            for i, bi in enumerate(boundaries):
                inter = bi.intersection(ifr_ring)
                if not inter.is_empty:
                    points.extend(map(tuple, shapely.get_coordinates(inter)))
                for bj in boundaries[i + 1 :]:
                    inter = bi.intersection(bj)
                    if not inter.is_empty:
                        points.extend(map(tuple, shapely.get_coordinates(inter)))
            forbidden = shapely.unary_union(nfp_geoms)
            fboundary = forbidden.boundary
            candidates = []
            for x, y in points:
                if not (
                    ix0 - CONTACT_TOL <= x <= ix1 + CONTACT_TOL
                    and iy0 - CONTACT_TOL <= y <= iy1 + CONTACT_TOL
                ):
                    continue
                pt = shapely.Point(x, y)
                # on-boundary placements are contact, not overlap
                if forbidden.contains(pt) and fboundary.distance(pt) > 1e-9:
                    continue
                candidates.append((x, y))
        if not candidates:
            raise PlacementImpossible(f"no feasible position for polygon {pid}")
        best = None
        for x, y in candidates:
            key = (_quant(max(max_x, x + bx1)), _quant(y), _quant(x))
            if best is None or key < best[0]:
                best = (key, float(x), float(y))
        _, x, y = best
        poses[pid] = Pose(x, y, math.cos(angles[pid]), math.sin(angles[pid]))
        placed.append(pid)
        max_x = max(max_x, x + bx1)

    return PackingInstance(
        list(polygons), container, [poses[i] for i in range(len(polygons))]
    )


def _strip_length(inst: PackingInstance) -> float:
    from .geometry import occupied_length

    return occupied_length(inst)


def _feasible_angle_indices(
    polygons: Sequence[Polygon], cfg: TeacherConfig, height: float, cache: PlacementCache
) -> list[list[int]]:
    angles = cfg.angles()
    out: list[list[int]] = []
    for pid in range(len(polygons)):
        ok = []
        for ai, ang in enumerate(angles):
            rp = cache.rotated(pid, float(ang))
            x0, y0, x1, y1 = rp.bounds
            if y1 - y0 <= height + CONTACT_TOL:
                ok.append(ai)
        if not ok:
            raise PlacementImpossible(
                f"polygon {pid} does not fit the strip at any of {cfg.n_angles} angles"
            )
        out.append(ok)
    return out


def _ga_restart(
    polygons: Sequence[Polygon],
    container: Strip,
    cfg: TeacherConfig,
    rng: np.random.Generator,
    cache: PlacementCache,
    valid_angles: list[list[int]],
) -> tuple[Chromosome, float]:
    n = len(polygons)
    angles = cfg.angles()

    fitness_cache: dict[Chromosome, float] = {}

    def fitness(ch: Chromosome) -> float:
        if ch not in fitness_cache:
            per_poly = [float(angles[ch.angle_idx[i]]) for i in range(n)]
            inst = place_sequence(polygons, container, list(ch.order), per_poly, cache)
            fitness_cache[ch] = _strip_length(inst)
        return fitness_cache[ch]

    def random_chromosome() -> Chromosome:
        order = tuple(rng.permutation(n).tolist())
        angle_idx = tuple(
            int(valid_angles[i][rng.integers(len(valid_angles[i]))]) for i in range(n)
        )
        return Chromosome(order, angle_idx)

    # greedy seeds: biggest-first order with (a) unrotated angles and
    # (b) per-piece angles minimizing the rotated bounding-box area
    seed_order = tuple(
        sorted(range(n), key=lambda i: (-polygons[i].area, i))
    )
    seed_angles = tuple(
        0 if 0 in valid_angles[i] else valid_angles[i][0] for i in range(n)
    )

    def bbox_area(pid: int, ai: int) -> float:
        x0, y0, x1, y1 = cache.rotated(pid, float(angles[ai])).bounds
        return (x1 - x0) * (y1 - y0)

    tight_angles = tuple(
        min(valid_angles[i], key=lambda ai: (bbox_area(i, ai), ai)) for i in range(n)
    )
    population = [Chromosome(seed_order, seed_angles), Chromosome(seed_order, tight_angles)]
    del population[cfg.population:]
    while len(population) < cfg.population:
        population.append(random_chromosome())

    def tournament() -> Chromosome:
        i, j = rng.integers(len(population)), rng.integers(len(population))
        a, b = population[int(i)], population[int(j)]
        return a if fitness(a) <= fitness(b) else b

    def crossover(p1: Chromosome, p2: Chromosome) -> Chromosome:
        cut = int(rng.integers(1, n)) if n > 1 else 0
        head = list(p1.order[:cut])
        tail = [g for g in p2.order if g not in head]
        order = tuple(head + tail)
        angle_idx = tuple(
            p1.angle_idx[i] if i in head else p2.angle_idx[i] for i in range(n)
        )
        return Chromosome(order, angle_idx)

    def mutate(ch: Chromosome) -> Chromosome:
        order = list(ch.order)
        for i in range(n - 1):
            if rng.random() < cfg.mutation_rate:
                order[i], order[i + 1] = order[i + 1], order[i]
        angle_idx = list(ch.angle_idx)
        for i in range(n):
            if rng.random() < cfg.mutation_rate:
                angle_idx[i] = int(valid_angles[i][rng.integers(len(valid_angles[i]))])
        return Chromosome(tuple(order), tuple(angle_idx))

    for _ in range(cfg.generations):
        ranked = sorted(population, key=fitness)
        next_pop = [ranked[0]]  # elitism
        while len(next_pop) < cfg.population:
            child = mutate(crossover(tournament(), tournament()))
            next_pop.append(child)
        population = next_pop

    best = min(population, key=fitness)
    return best, fitness(best)


def evolve(
    polygons: Sequence[Polygon], container: Strip, cfg: TeacherConfig
) -> TeacherRecord:
    """Run the GA `cfg.restarts` times with fresh seeds; return the best layout.

    Deterministic for a fixed cfg.rng_seed.
    """
    cache = PlacementCache(polygons, padding=cfg.padding)
    valid_angles = _feasible_angle_indices(polygons, cfg, container.height, cache)
    best: tuple[float, int, Chromosome] | None = None
    for restart in range(cfg.restarts):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.rng_seed, spawn_key=(restart,))
        )
        chrom, length = _ga_restart(polygons, container, cfg, rng, cache, valid_angles)
        if best is None or length < best[0] - 1e-12:
            best = (length, restart, chrom)
    length, restart, chrom = best
    angles = cfg.angles()
    per_poly = [float(angles[chrom.angle_idx[i]]) for i in range(len(polygons))]
    inst = place_sequence(polygons, container, list(chrom.order), per_poly, cache)
    return TeacherRecord(
        instance=inst,
        utilization=utilization(inst),
        provenance={
            "config": {
                "n_angles": cfg.n_angles,
                "population": cfg.population,
                "generations": cfg.generations,
                "restarts": cfg.restarts,
                "mutation_rate": cfg.mutation_rate,
                "padding": cfg.padding,
            },
            "seed": cfg.rng_seed,
            "restart": restart,
            "strip_length": length,
        },
    )


DrawFn = Callable[[np.random.Generator], tuple[list[Polygon], Strip]]


def generate_corpus(
    draw: DrawFn,
    count: int,
    cfg: TeacherConfig,
    scramble_rotations: bool = True,
) -> tuple[list[TeacherRecord], WeightStats, list[int]]:
    """Draw polygon sets, scramble their rotations, pack each with the GA.

    Returns (records, utilization stats, skipped draw indices).  Draws that
    raise PlacementImpossible are skipped and logged in the third element.
    """
    records: list[TeacherRecord] = []
    skipped: list[int] = []
    for k in range(count):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.rng_seed, spawn_key=(1000 + k,))
        )
        polygons, strip = draw(rng)
        if scramble_rotations:
            polygons = [p.rotated(float(rng.uniform(0.0, 2.0 * math.pi))) for p in polygons]
        item_cfg = replace(cfg, rng_seed=int(rng.integers(2**31 - 1)))
        try:
            rec = evolve(polygons, strip, item_cfg)
        except PlacementImpossible:
            skipped.append(k)
            continue
        rec.provenance["draw_index"] = k
        records.append(rec)
    if not records:
        raise GenerationFailedError("all draws failed placement")
    utils = [r.utilization for r in records]
    stats = WeightStats(
        u_min=min(utils), u_avg=sum(utils) / len(utils), u_max=max(utils)
    )
    return records, stats, skipped


class GenerationFailedError(RuntimeError):
    pass


def write_corpus(path: str, records: Iterable[TeacherRecord]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))
