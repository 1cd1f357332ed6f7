"""Attention-based score network over polygon poses, plus its training loop.

Architecture: a residual GCN over each contour graph pooled into per-shape
features, a pose MLP, a Gaussian Fourier time embedding, three attention
relation encoders (shape-shape, shape-pose, shape-boundary), and a
transformer encoder-decoder emitting one 4-vector per polygon.  The output
approximates the gradient of the log pose density and is consumed directly
by the reverse-SDE sampler.

All parameters live in a named ParamStore; training uses decoupled weight
decay (AdamW) with denoising score matching targets and optional
utilization weighting.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, concat, gradcheck, relu, softmax
from .diffusion import SigmaSchedule, WeightStats, sigma, weight_lambda
from .geometry import (
    Container,
    ContourGraph,
    PackingInstance,
    Polygon,
    Strip,
    container_height,
    contour_graph,
)

__all__ = [
    "ModelConfig",
    "ParamStore",
    "ScoreModel",
    "Conditioning",
    "TrainConfig",
    "TrainResult",
    "AdamW",
    "gcn_layer",
    "residual_combine",
    "attention",
    "fourier_time",
    "normalized_adjacency",
    "prepare_record",
    "stack_conditionings",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "gradcheck",
]

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    gcn_layers: int = 4
    d_p: int = 64
    d_b: int = 128
    d_a: int = 64
    d_t: int = 64
    enc_layers: int = 8
    dec_layers: int = 8
    heads: int = 4
    ff_mult: int = 2

    def __post_init__(self) -> None:
        for name in ("gcn_layers", "d_p", "d_b", "d_a", "d_t", "enc_layers", "dec_layers", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide d_p + d_a ({self.d_model})")

    @property
    def d_model(self) -> int:
        return self.d_p + self.d_a

    @staticmethod
    def toy() -> "ModelConfig":
        return ModelConfig(
            gcn_layers=2, d_p=16, d_b=32, d_a=16, d_t=16, enc_layers=2, dec_layers=2
        )


class ParamStore:
    """Named parameters and constant buffers with recorded shapes."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def parameter(
        self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
        fan_in: int | None = None, zero: bool = False,
    ) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        if zero:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in if fan_in is not None else shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self.buffers[name] = np.asarray(value, dtype=float)
        return self.buffers[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            src = arrays[f"param/{k}"]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {t.data.shape}")
            t.data = np.asarray(src, dtype=np.float64).copy()
        for k in self.buffers:
            self.buffers[k] = np.asarray(arrays[f"buffer/{k}"], dtype=np.float64).copy()


# --- primitive layers ---------------------------------------------------------


def normalized_adjacency(edges: np.ndarray, m: int) -> np.ndarray:
    """Symmetric-normalized adjacency with self-loops, D^-1/2 (A+I) D^-1/2."""
    a = np.eye(m)
    for i, j in edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    d = a.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    return a * inv[:, None] * inv[None, :]


def gcn_layer(h: Tensor | np.ndarray, adj_norm: np.ndarray | Tensor, w: Tensor) -> Tensor:
    """One aggregation step: ReLU(D^-1/2 (A+I) D^-1/2 H W)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    adj = adj_norm if isinstance(adj_norm, Tensor) else Tensor(adj_norm)
    return relu(adj @ h @ w)


def residual_combine(h_new: Tensor, h_old: Tensor, proj: "Linear | None" = None) -> Tensor:
    """Residual merge; h_old passes through `proj` when widths differ."""
    skip = proj(h_old) if proj is not None else h_old
    return h_new + skip


def attention(q: Tensor, k: Tensor, v: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Single-head scaled dot-product attention softmax(QK^T/sqrt(d_k)) V."""
    d_k = k.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    return softmax(scores, axis=-1, additive_mask=additive_mask) @ v


def fourier_time(t: np.ndarray | float, w: np.ndarray) -> np.ndarray:
    """Gaussian Fourier projection (sin 2*pi*w*t, cos 2*pi*w*t), w frozen."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    phase = 2.0 * math.pi * t[:, None] * w[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


class Linear:
    def __init__(
        self, store: ParamStore, name: str, d_in: int, d_out: int,
        rng: np.random.Generator, bias: bool = True, zero: bool = False,
    ):
        self.w = store.parameter(f"{name}.w", (d_in, d_out), rng, fan_in=d_in, zero=zero)
        self.b = store.parameter(f"{name}.b", (d_out,), rng, zero=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator):
        self.gamma = store.parameter(f"{name}.gamma", (d,), rng, zero=True)
        self.beta = store.parameter(f"{name}.beta", (d,), rng, zero=True)
        self.eps = 1e-6

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed * (self.gamma + 1.0) + self.beta


class FeedForward:
    def __init__(self, store: ParamStore, name: str, d: int, hidden: int, rng):
        self.l1 = Linear(store, f"{name}.l1", d, hidden, rng)
        self.l2 = Linear(store, f"{name}.l2", hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(relu(self.l1(x)))


class MultiHeadAttention:
    """Standard multi-head attention with per-source input projections."""

    def __init__(
        self, store: ParamStore, name: str, d_q: int, d_k: int, d_v: int,
        d_model: int, heads: int, rng,
    ):
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(store, f"{name}.wq", d_q, d_model, rng)
        self.wk = Linear(store, f"{name}.wk", d_k, d_model, rng)
        self.wv = Linear(store, f"{name}.wv", d_v, d_model, rng)
        self.wo = Linear(store, f"{name}.wo", d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d_head).swapaxes(1, 2)

    def __call__(self, q_src: Tensor, k_src: Tensor, v_src: Tensor) -> Tensor:
        q = self._split(self.wq(q_src))
        k = self._split(self.wk(k_src))
        v = self._split(self.wv(v_src))
        out = attention(q, k, v)  # (b, heads, nq, d_head)
        b, _, nq, _ = out.shape
        merged = out.swapaxes(1, 2).reshape(b, nq, self.heads * self.d_head)
        return self.wo(merged)


class AttentionPool:
    """Learned-query pooling: softmax(H W_k^T / sqrt(d)) weighted sum of H."""

    def __init__(self, store: ParamStore, name: str, d: int, rng):
        self.wk = store.parameter(f"{name}.wk", (1, d), rng, fan_in=d)
        self.d = d

    def __call__(self, h: Tensor, mask: np.ndarray | None = None) -> Tensor:
        # h: (g, m, d); mask: (g, m) with 1 = real node
        scores = (h @ self.wk.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.d))
        additive = None
        if mask is not None:
            additive = ((mask - 1.0) * 1e30)[..., None]
        weights = softmax(scores, axis=-2, additive_mask=additive)
        return (weights * h).sum(axis=-2)


class GeometryEncoder:
    """Residual GCN over contour graphs followed by attention pooling."""

    def __init__(self, store: ParamStore, name: str, layers: int, d_out: int, rng):
        widths = [3] + [d_out] * layers
        self.weights = [
            store.parameter(f"{name}.gcn{i}.w", (widths[i], widths[i + 1]), rng, fan_in=widths[i])
            for i in range(layers)
        ]
        self.projs = [
            Linear(store, f"{name}.proj{i}", widths[i], widths[i + 1], rng, bias=False)
            if widths[i] != widths[i + 1]
            else None
            for i in range(layers)
        ]
        self.pool = AttentionPool(store, f"{name}.pool", d_out, rng)

    def __call__(self, feats: np.ndarray, adj: np.ndarray, mask: np.ndarray) -> Tensor:
        h = Tensor(feats)
        for w, proj in zip(self.weights, self.projs):
            h = residual_combine(gcn_layer(h, adj, w), h, proj)
        return self.pool(h, mask)


# --- conditioning --------------------------------------------------------------


@dataclass
class Conditioning:
    """Constant (non-trainable) network inputs describing one or more instances.

    Arrays carry a leading batch axis: polygon graphs (B, n, m, 3) with
    normalized adjacency (B, n, m, m) and node mask (B, n, m); boundary
    graphs (B, mb, 3) likewise.  Contour coordinates are pre-divided by the
    container height.
    """

    poly_feats: np.ndarray
    poly_adj: np.ndarray
    poly_mask: np.ndarray
    bnd_feats: np.ndarray
    bnd_adj: np.ndarray
    bnd_mask: np.ndarray
    heights: np.ndarray  # (B,)

    @property
    def batch(self) -> int:
        return self.poly_feats.shape[0]

    @property
    def n_polygons(self) -> int:
        return self.poly_feats.shape[1]


def _strip_boundary_polygon(polygons: Sequence[Polygon], strip: Strip) -> Polygon:
    total = sum(p.area for p in polygons)
    length = total / strip.height * 1.5
    return Polygon([(0, 0), (length, 0), (length, strip.height), (0, strip.height)])


def _graph_arrays(graphs: list[ContourGraph], m_pad: int | None = None):
    m_max = m_pad if m_pad is not None else max(len(g) for g in graphs)
    feats = np.zeros((len(graphs), m_max, 3))
    adj = np.zeros((len(graphs), m_max, m_max))
    mask = np.zeros((len(graphs), m_max))
    for i, g in enumerate(graphs):
        m = len(g)
        feats[i, :m] = g.features
        adj[i, :m, :m] = normalized_adjacency(g.edges, m)
        mask[i, :m] = 1.0
    return feats, adj, mask


def make_conditioning(polygons: Sequence[Polygon], container: Container) -> Conditioning:
    height = container_height(container)
    poly_graphs = [contour_graph(p, scale=height) for p in polygons]
    pf, pa, pm = _graph_arrays(poly_graphs)
    if isinstance(container, Strip):
        bpoly = _strip_boundary_polygon(polygons, container)
    else:
        bpoly = container.polygon
    bf, ba, bm = _graph_arrays([contour_graph(bpoly, scale=height)])
    return Conditioning(
        poly_feats=pf[None],
        poly_adj=pa[None],
        poly_mask=pm[None],
        bnd_feats=bf,
        bnd_adj=ba,
        bnd_mask=bm,
        heights=np.array([height]),
    )


def stack_conditionings(conds: list[Conditioning]) -> Conditioning:
    """Stack single-instance conditionings (equal polygon counts) into a batch."""
    n = conds[0].n_polygons
    if any(c.n_polygons != n for c in conds):
        raise ValueError("all instances in a batch must share the polygon count")
    mp = max(c.poly_feats.shape[2] for c in conds)
    mb = max(c.bnd_feats.shape[1] for c in conds)

    def pad(a, m, axis):
        width = [(0, 0)] * a.ndim
        width[axis] = (0, m - a.shape[axis])
        if a.ndim > axis + 1 and a.shape[axis + 1] == a.shape[axis]:  # square adj
            width[axis + 1] = width[axis]
        return np.pad(a, width)

    return Conditioning(
        poly_feats=np.concatenate([pad(c.poly_feats, mp, 2) for c in conds]),
        poly_adj=np.concatenate([pad(c.poly_adj, mp, 2) for c in conds]),
        poly_mask=np.concatenate([pad(c.poly_mask, mp, 2) for c in conds]),
        bnd_feats=np.concatenate([pad(c.bnd_feats, mb, 1) for c in conds]),
        bnd_adj=np.concatenate([pad(c.bnd_adj, mb, 1) for c in conds]),
        bnd_mask=np.concatenate([pad(c.bnd_mask, mb, 1) for c in conds]),
        heights=np.concatenate([c.heights for c in conds]),
    )


# --- the score network ----------------------------------------------------------


class ScoreModel:
    def __init__(
        self,
        config: ModelConfig = ModelConfig.toy(),
        sched: SigmaSchedule = SigmaSchedule(),
        seed: int = 0,
    ):
        self.config = config
        self.sched = sched
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        c = config
        d_model = c.d_model

        self.poly_encoder = GeometryEncoder(self.store, "poly_enc", c.gcn_layers, c.d_p, rng)
        self.bnd_encoder = GeometryEncoder(self.store, "bnd_enc", c.gcn_layers, c.d_b, rng)

        self.pose_l1 = Linear(self.store, "pose_mlp.l1", 4, c.d_a, rng)
        self.pose_l2 = Linear(self.store, "pose_mlp.l2", c.d_a, c.d_a, rng)

        self.fourier_w = self.store.buffer("fourier.w", rng.standard_normal(c.d_t))
        self.time_proj = Linear(self.store, "time_proj", 2 * c.d_t, d_model, rng)

        self.rel_geo = MultiHeadAttention(self.store, "rel.geo", c.d_p, c.d_p, c.d_p, d_model, c.heads, rng)
        self.rel_spa = MultiHeadAttention(self.store, "rel.spa", d_model, c.d_a, d_model, d_model, c.heads, rng)
        self.rel_bnd = MultiHeadAttention(self.store, "rel.bnd", d_model, c.d_b, c.d_b, d_model, c.heads, rng)
        self.rel_ff = {
            "geo": FeedForward(self.store, "rel.geo.ff", d_model, c.ff_mult * d_model, rng),
            "spa": FeedForward(self.store, "rel.spa.ff", d_model, c.ff_mult * d_model, rng),
            "bnd": FeedForward(self.store, "rel.bnd.ff", d_model, c.ff_mult * d_model, rng),
        }

        self.enc_layers = []
        for i in range(c.enc_layers):
            self.enc_layers.append(
                {
                    "ln1": LayerNorm(self.store, f"enc{i}.ln1", d_model, rng),
                    "mha": MultiHeadAttention(self.store, f"enc{i}.mha", d_model, d_model, d_model, d_model, c.heads, rng),
                    "ln2": LayerNorm(self.store, f"enc{i}.ln2", d_model, rng),
                    "ff": FeedForward(self.store, f"enc{i}.ff", d_model, c.ff_mult * d_model, rng),
                }
            )
        self.dec_layers = []
        for i in range(c.dec_layers):
            self.dec_layers.append(
                {
                    "ln1": LayerNorm(self.store, f"dec{i}.ln1", d_model, rng),
                    "self": MultiHeadAttention(self.store, f"dec{i}.self", d_model, d_model, d_model, d_model, c.heads, rng),
                    "ln2": LayerNorm(self.store, f"dec{i}.ln2", d_model, rng),
                    "cross": MultiHeadAttention(self.store, f"dec{i}.cross", d_model, d_model, d_model, d_model, c.heads, rng),
                    "ln3": LayerNorm(self.store, f"dec{i}.ln3", d_model, rng),
                    "ff": FeedForward(self.store, f"dec{i}.ff", d_model, c.ff_mult * d_model, rng),
                }
            )
        self.ln_out = LayerNorm(self.store, "head.ln", d_model, rng)
        self.head = Linear(self.store, "head.out", d_model, 4, rng, zero=True)

    # -- feature encoders ---------------------------------------------------

    def encode_geometry(self, cond: Conditioning) -> tuple[Tensor, Tensor]:
        """(F_P: (B, n, d_p), F_B: (B, 1, d_b)) from contour graphs."""
        b, n, m, _ = cond.poly_feats.shape
        flat_fp = self.poly_encoder(
            cond.poly_feats.reshape(b * n, m, 3),
            cond.poly_adj.reshape(b * n, m, m),
            cond.poly_mask.reshape(b * n, m),
        )
        f_p = flat_fp.reshape(b, n, self.config.d_p)
        f_b = self.bnd_encoder(cond.bnd_feats, cond.bnd_adj, cond.bnd_mask)
        return f_p, f_b.reshape(b, 1, self.config.d_b)

    def encode_poses(self, states: Tensor) -> Tensor:
        return self.pose_l2(relu(self.pose_l1(states)))

    def encode_state(
        self, f_p: Tensor, f_a: Tensor, f_b: Tensor, f_t: np.ndarray
    ) -> Tensor:
        """Fuse geometry, pose, boundary, and time into per-polygon latents.

        Three attention branches (each followed by its feed-forward layer)
        are summed onto the concatenated (F_P, F_A) base stream:
        shape-shape attention over F_P, pose attention with keys F_A, and
        boundary cross-attention with keys/values F_B.
        """
        qv = concat([f_p, f_a], axis=-1)
        geo = self.rel_ff["geo"](self.rel_geo(f_p, f_p, f_p))
        spa = self.rel_ff["spa"](self.rel_spa(qv, f_a, qv))
        bnd = self.rel_ff["bnd"](self.rel_bnd(qv, f_b, f_b))
        t_emb = self.time_proj(Tensor(f_t[:, None, :]))
        return qv + geo + spa + bnd + t_emb

    # -- transformer ----------------------------------------------------------

    def _encoder(self, x: Tensor) -> Tensor:
        for layer in self.enc_layers:
            h = layer["ln1"](x)
            x = x + layer["mha"](h, h, h)
            x = x + layer["ff"](layer["ln2"](x))
        return x

    def _decoder(self, x: Tensor, memory: Tensor) -> Tensor:
        for layer in self.dec_layers:
            h = layer["ln1"](x)
            x = x + layer["self"](h, h, h)
            x = x + layer["cross"](layer["ln2"](x), memory, memory)
            x = x + layer["ff"](layer["ln3"](x))
        return x

    # -- full forward -----------------------------------------------------------

    def score_from_features(
        self,
        f_p: Tensor,
        f_b: Tensor,
        states: Tensor | np.ndarray,
        t: float | np.ndarray,
        heights: np.ndarray,
    ) -> Tensor:
        states = states if isinstance(states, Tensor) else Tensor(states)
        b = states.shape[0]
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        sig = np.array([sigma(float(tv), self.sched) for tv in t_arr])
        if sig.shape[0] == 1 and b > 1:
            sig = np.repeat(sig, b, axis=0)
        # per-coordinate preconditioning: translations live at container
        # scale, (cos, sin) at unit scale; dividing by sqrt(sigma^2 + scale^2)
        # keeps the pose-MLP inputs near unit variance at every noise level
        coord_scale = np.stack(
            [heights, heights, np.ones(b), np.ones(b)], axis=-1
        )  # (b, 4)
        c_in = 1.0 / np.sqrt(sig[:, None] ** 2 + coord_scale**2)
        f_a = self.encode_poses(states * Tensor(c_in[:, None, :]))
        f_t = fourier_time(t, self.fourier_w)
        if f_t.shape[0] == 1 and b > 1:
            f_t = np.repeat(f_t, b, axis=0)
        latents = self.encode_state(f_p, f_a, f_b, f_t)
        memory = self._encoder(latents)
        decoded = self._decoder(latents, memory)
        raw = self.head(self.ln_out(decoded))
        # the head predicts sigma * score; dividing keeps output magnitudes
        # uniform across noise levels
        return raw * Tensor(1.0 / sig.reshape(-1, 1, 1))

    def score_forward(
        self, states: Tensor | np.ndarray, t: float | np.ndarray, cond: Conditioning
    ) -> Tensor:
        """Per-polygon score estimates for a batch of diffusion states.

        `states` is (B, n, 4); `t` is a scalar or per-instance array.  When
        the conditioning holds one instance and B > 1, geometry features are
        shared across the batch (independent chains over one layout).
        """
        f_p, f_b = self.encode_geometry(cond)
        b = states.shape[0]
        if cond.batch == 1 and b > 1:
            f_p = f_p.broadcast_to((b,) + f_p.shape[1:])
            f_b = f_b.broadcast_to((b,) + f_b.shape[1:])
            heights = np.repeat(cond.heights, b)
        elif cond.batch != b:
            raise ValueError(f"batch mismatch: states {b}, conditioning {cond.batch}")
        else:
            heights = cond.heights
        return self.score_from_features(f_p, f_b, states, t, heights)

    def make_score_fn(self, polygons: Sequence[Polygon], container: Container):
        """Precompute geometry features and return a sampling score function."""
        cond = make_conditioning(polygons, container)
        f_p_t, f_b_t = self.encode_geometry(cond)
        f_p, f_b = f_p_t.data, f_b_t.data
        height = cond.heights

        def score_fn(states: np.ndarray, t: float) -> np.ndarray:
            b = states.shape[0]
            fp = Tensor(np.broadcast_to(f_p, (b,) + f_p.shape[1:]))
            fb = Tensor(np.broadcast_to(f_b, (b,) + f_b.shape[1:]))
            heights = np.repeat(height, b)
            return self.score_from_features(fp, fb, states, t, heights).data

        return score_fn


# --- optimizer -------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self, store: ParamStore, lr: float = 2e-4, betas=(0.9, 0.999),
        eps: float = 1e-8, weight_decay: float = 1e-4,
    ):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.params.items()}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1**self.step_count
        bc2 = 1.0 - self.b2**self.step_count
        for k, p in self.store.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt/m/{k}": v for k, v in self.m.items()}
        out.update({f"opt/v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.m = {k: np.asarray(arrays[f"opt/m/{k}"], dtype=np.float64).copy() for k in self.m}
        self.v = {k: np.asarray(arrays[f"opt/v/{k}"], dtype=np.float64).copy() for k in self.v}
        self.step_count = step_count


# --- training ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 1e-4
    seed: int = 0
    t_min: float = 0.01
    t_max: float = 1.0
    use_weighting: bool = False
    sigma_weighting: bool = True
    log_every: int = 50


@dataclass
class PreparedRecord:
    cond: Conditioning
    a0: np.ndarray  # (n, 4)
    utilization: float


@dataclass
class TrainResult:
    loss_curve: list[tuple[int, float]]
    final_loss: float


def prepare_record(inst: PackingInstance, utilization: float) -> PreparedRecord:
    from .diffusion import poses_to_array

    return PreparedRecord(
        cond=make_conditioning(inst.polygons, inst.container),
        a0=poses_to_array(inst.poses),
        utilization=utilization,
    )


def _batch_loss(
    model: ScoreModel,
    batch: list[PreparedRecord],
    rng: np.random.Generator,
    cfg: TrainConfig,
    stats: WeightStats | None,
) -> Tensor:
    cond = stack_conditionings([r.cond for r in batch])
    a0 = np.stack([r.a0 for r in batch])
    b, n, _ = a0.shape
    t = rng.uniform(cfg.t_min, cfg.t_max, size=b)
    sig = np.array([sigma(float(tv), model.sched) for tv in t])
    eps = rng.standard_normal((b, n, 4))
    at = a0 + sig[:, None, None] * eps
    target = (a0 - at) / (sig**2)[:, None, None]

    weights = np.ones(b)
    if cfg.sigma_weighting:
        weights = weights * sig**2
    if cfg.use_weighting:
        if stats is None:
            raise ValueError("use_weighting requires corpus WeightStats")
        weights = weights * np.array(
            [weight_lambda(r.utilization, stats) for r in batch]
        )

    psi = model.score_forward(at, t, cond)
    err = (psi - Tensor(target)) ** 2
    per_instance = err.reshape(b, n * 4).mean(axis=1)
    return (per_instance * Tensor(weights)).mean()


def train(
    records: list[PreparedRecord],
    model: ScoreModel,
    cfg: TrainConfig,
    stats: WeightStats | None = None,
    optimizer: AdamW | None = None,
    rng: np.random.Generator | None = None,
    start_step: int = 0,
) -> TrainResult:
    """Denoising score matching training over a prepared corpus.

    Batches group records with equal polygon counts.  Deterministic for a
    fixed seed; pass the optimizer/rng back in to resume bit-exactly.
    """
    if not records:
        raise ValueError("empty corpus")
    if optimizer is None:
        optimizer = AdamW(model.store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    groups: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.a0.shape[0], []).append(i)
    group_keys = sorted(groups)
    group_weights = np.array([len(groups[k]) for k in group_keys], dtype=float)
    group_weights /= group_weights.sum()

    curve: list[tuple[int, float]] = []
    loss_val = math.nan
    for step in range(start_step, start_step + cfg.steps):
        key = group_keys[int(rng.choice(len(group_keys), p=group_weights))]
        pool = groups[key]
        take = min(cfg.batch_size, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        batch = [records[pool[i]] for i in idx]
        optimizer.zero_grad()
        loss = _batch_loss(model, batch, rng, cfg, stats)
        loss.backward()
        optimizer.step()
        loss_val = float(loss.data)
        if step % cfg.log_every == 0 or step == start_step + cfg.steps - 1:
            curve.append((step, loss_val))
    return TrainResult(loss_curve=curve, final_loss=loss_val)


# --- checkpointing -----------------------------------------------------------------


def save_checkpoint(
    path: str,
    model: ScoreModel,
    optimizer: AdamW | None = None,
    rng: np.random.Generator | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    """Self-describing container: name -> shape -> row-major float64 values,
    with a JSON header carrying config and format version."""
    arrays = model.store.state_arrays()
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    meta = {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "sched": asdict(model.sched),
        "step": step,
        "opt_step": optimizer.step_count if optimizer else None,
        "opt_hparams": {
            "lr": optimizer.lr,
            "betas": [optimizer.b1, optimizer.b2],
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
        }
        if optimizer
        else None,
        "rng_state": json.dumps(rng.bit_generator.state) if rng is not None else None,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fp:
        np.savez(fp, **arrays)


def load_checkpoint(path: str) -> tuple[ScoreModel, AdamW | None, np.random.Generator | None, dict]:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays.pop("__meta__")).decode())
    if meta["format_version"] != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta['format_version']}")
    model = ScoreModel(
        config=ModelConfig(**meta["config"]), sched=SigmaSchedule(**meta["sched"])
    )
    model.store.load_state_arrays(arrays)
    optimizer = None
    if meta.get("opt_hparams"):
        hp = meta["opt_hparams"]
        optimizer = AdamW(
            model.store, lr=hp["lr"], betas=tuple(hp["betas"]),
            eps=hp["eps"], weight_decay=hp["weight_decay"],
        )
        optimizer.load_state_arrays(arrays, meta["opt_step"])
    rng = None
    if meta.get("rng_state"):
        rng = np.random.default_rng(0)
        rng.bit_generator.state = json.loads(meta["rng_state"])
    return model, optimizer, rng, meta
