"""Variance-exploding SDE machinery for pose diffusion.

The forward process perturbs all four pose coordinates (tx, ty, cos, sin)
with sigma(t) = sigma_min^(1-t) * sigma_max^t noise; training regresses a
score network onto (A(0) - A(t)) / sigma^2, optionally weighted by the
teacher layout's utilization; sampling integrates the reverse-time SDE
with Euler-Maruyama over a descending time grid and picks the best
collision-free chain from a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import Container, PackingInstance, Polygon, Pose, utilization

__all__ = [
    "SigmaSchedule",
    "DiffusionState",
    "WeightStats",
    "SampleConfig",
    "SampleResult",
    "sigma",
    "g_coeff",
    "perturb",
    "dsm_target",
    "weight_lambda",
    "dsm_loss",
    "sample_rsde",
    "poses_to_array",
    "array_to_poses",
    "chain_rng",
]


@dataclass(frozen=True)
class SigmaSchedule:
    sigma_min: float = 0.1
    sigma_max: float = 1000.0

    def __post_init__(self) -> None:
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )


def _check_t(t: float) -> None:
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")


def sigma(t: float, sched: SigmaSchedule) -> float:
    """Geometric noise level sigma_min * (sigma_max / sigma_min)^t.

    Evaluated as sigma_min^(1-t) * sigma_max^t so both endpoints are exact
    (x**0 == 1.0 and x**1 == x hold exactly in floating point).
    """
    _check_t(t)
    return sched.sigma_min ** (1.0 - t) * sched.sigma_max ** t


def g_coeff(t: float, sched: SigmaSchedule) -> float:
    """Diffusion coefficient g(t) = sigma(t) * sqrt(2 ln(sigma_max/sigma_min))."""
    return sigma(t, sched) * math.sqrt(2.0 * math.log(sched.sigma_max / sched.sigma_min))


@dataclass
class DiffusionState:
    """Raw per-polygon 4-vectors (tx, ty, c, s); (c, s) is unnormalized in flight."""

    coords: np.ndarray  # (..., n, 4)
    t: float

    def readout_poses(self) -> list[Pose]:
        return array_to_poses(self.coords)


def poses_to_array(poses: Sequence[Pose]) -> np.ndarray:
    return np.array([[p.tx, p.ty, p.cos_t, p.sin_t] for p in poses])


def array_to_poses(coords: np.ndarray) -> list[Pose]:
    """Project raw 4-vectors onto valid poses ((c, s) to the unit circle)."""
    return [Pose.from_raw(*row) for row in np.asarray(coords, dtype=float)]


def perturb(a0: np.ndarray, t: float, sched: SigmaSchedule, rng: np.random.Generator) -> np.ndarray:
    """Forward marginal draw A(t) = A(0) + sigma(t) * eps, eps ~ N(0, I)."""
    s = sigma(t, sched)
    return a0 + s * rng.standard_normal(a0.shape)


def dsm_target(a0: np.ndarray, at: np.ndarray, t: float, sched: SigmaSchedule) -> np.ndarray:
    """Denoising score matching regression target (A(0) - A(t)) / sigma(t)^2."""
    s = sigma(t, sched)
    return (a0 - at) / (s * s)


@dataclass(frozen=True)
class WeightStats:
    """Utilization spread of the teacher corpus (min <= avg <= max)."""

    u_min: float
    u_avg: float
    u_max: float

    def __post_init__(self) -> None:
        if not (self.u_min <= self.u_avg <= self.u_max):
            raise ValueError(
                f"need u_min <= u_avg <= u_max, got {self.u_min}, {self.u_avg}, {self.u_max}"
            )

    @property
    def degenerate(self) -> bool:
        return self.u_max <= self.u_min


def weight_lambda(u: float, stats: WeightStats) -> float:
    """Sigmoid loss weight sigmoid((u - U_avg) / (U_max - U_min) * 10).

    Lies in (0, 1), increases with utilization, and equals 1/2 at U_avg.
    """
    if stats.degenerate:
        raise ValueError(
            "degenerate utilization stats (u_max == u_min); disable weighting "
            "for single-utilization corpora"
        )
    z = (u - stats.u_avg) / (stats.u_max - stats.u_min) * 10.0
    return 1.0 / (1.0 + math.exp(-z))


def dsm_loss(score_out: np.ndarray, target: np.ndarray, lam: float | np.ndarray = 1.0) -> float:
    """Weighted mean squared error.

    Per instance: lam * mean of squared coordinate errors; batched inputs
    (leading axis) average the per-instance losses.
    """
    score_out = np.asarray(score_out, dtype=float)
    target = np.asarray(target, dtype=float)
    if score_out.shape != target.shape:
        raise ValueError(f"shape mismatch {score_out.shape} vs {target.shape}")
    err = (score_out - target) ** 2
    if err.ndim <= 2:
        return float(np.asarray(lam) * err.mean())
    per_instance = err.reshape(err.shape[0], -1).mean(axis=1)
    return float(np.mean(np.asarray(lam) * per_instance))


# --- reverse-time sampling ---------------------------------------------------


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 128
    t_start: float = 1.0
    t_end: float = 0.01
    batch: int = 128
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 < self.t_end < self.t_start <= 1.0):
            raise ValueError("need 0 < t_end < t_start <= 1")

    def time_grid(self) -> np.ndarray:
        dt = (self.t_start - self.t_end) / self.steps
        return self.t_start - dt * np.arange(self.steps + 1)


@dataclass
class SampleResult:
    instances: list[PackingInstance]
    feasible: list[bool]
    utilizations: list[float]
    selected: int
    selected_feasible: bool
    times: np.ndarray  # (steps + 1,)
    trajectory: np.ndarray | None  # (batch, steps + 1, n, 4)

    @property
    def best_instance(self) -> PackingInstance:
        return self.instances[self.selected]


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent per-chain stream; chain k's draws do not depend on the
    batch size, so a larger batch is a strict superset of a smaller one."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chain,)))


ScoreFn = Callable[[np.ndarray, float], np.ndarray]


def select_best(feasible: Sequence[bool], utils: Sequence[float]) -> tuple[int, bool]:
    """Collision-free result with the highest utilization; if none is
    feasible, the highest-utilization result, flagged."""
    feas_idx = [i for i, ok in enumerate(feasible) if ok]
    pool = feas_idx if feas_idx else range(len(utils))
    best = max(pool, key=lambda i: (utils[i], -i))
    return int(best), bool(feas_idx)


def sample_rsde(
    score_fn: ScoreFn,
    polygons: Sequence[Polygon],
    container: Container,
    cfg: SampleConfig,
    sched: SigmaSchedule = SigmaSchedule(),
    keep_trajectory: bool = False,
    freeze_noise: bool = False,
) -> SampleResult:
    """Integrate the reverse-time SDE with Euler-Maruyama over a batch.

    The grid descends from t_start to t_end in `steps` uniform steps; each
    step applies A += g(t)^2 * score * dt + g(t) * sqrt(dt) * eps.  States
    start at A(t_start) ~ N(0, sigma(t_start)^2 I).  Readout projects
    (c, s) to the unit circle.  `score_fn(states, t)` receives the raw
    (batch, n, 4) array.  `freeze_noise` zeroes eps (debugging aid).
    """
    n = len(polygons)
    b = cfg.batch
    times = cfg.time_grid()
    dt = (cfg.t_start - cfg.t_end) / cfg.steps

    init = np.empty((b, n, 4))
    noise = np.empty((b, cfg.steps, n, 4))
    for c in range(b):
        rng = chain_rng(cfg.rng_seed, c)
        init[c] = sigma(cfg.t_start, sched) * rng.standard_normal((n, 4))
        noise[c] = rng.standard_normal((cfg.steps, n, 4))
    if freeze_noise:
        noise[:] = 0.0

    states = init
    trajectory = None
    if keep_trajectory:
        trajectory = np.empty((b, cfg.steps + 1, n, 4))
        trajectory[:, 0] = states
    for k in range(cfg.steps):
        t = float(times[k])
        g = g_coeff(t, sched)
        psi = score_fn(states, t)
        states = states + (g * g) * psi * dt + g * math.sqrt(dt) * noise[:, k]
        if keep_trajectory:
            trajectory[:, k + 1] = states

    from .dataset import feasibility  # local import avoids a cycle at import time

    instances: list[PackingInstance] = []
    feasible: list[bool] = []
    utils: list[float] = []
    for c in range(b):
        poses = array_to_poses(states[c])
        inst = PackingInstance(list(polygons), container, poses)
        instances.append(inst)
        feasible.append(feasibility(inst).feasible)
        utils.append(utilization(inst))
    selected, any_feasible = select_best(feasible, utils)
    return SampleResult(
        instances=instances,
        feasible=feasible,
        utilizations=utils,
        selected=selected,
        selected_feasible=any_feasible,
        times=times,
        trajectory=trajectory,
    )
