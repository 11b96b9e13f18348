"""Tracker network: backbone, encoder, point queries, decoder and visibility head.

Parameters live in one flat ``{name: array}`` dict so they map directly onto
the checkpoint format.  A window of ``Wn`` frames is processed at once; query
arrays are laid out ``(Wn, N, ...)``.

Every forward has an explicit backward, and gradients flow through the
positions passed from one decoder layer to the next as well as through the
content features.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import attention
from .attention import DeformParams, MhaParams
from .errors import ConfigError, ShapeError, ValidationError
from .formats import coerce_fields, read_keyvalue, write_keyvalue
from .numerics import (MlpParams, check_finite, init_linear, layer_norm_backward,
                       layer_norm_forward, linear, linear_backward, mlp_backward,
                       mlp_forward, relu, relu_backward, sigmoid, uniform_init)
from .sampling import FeaturePyramid, make_plan, plan_backward, plan_gather

MODES = ("apu", "cost_volume_baseline", "no_position_update")
STRIDES = (4, 8)
BACKBONE_CHANNELS = (16, 32)


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    n_points: int = 4
    n_levels: int = 2
    n_encoder: int = 2
    n_decoder: int = 5
    window: int = 8
    image_size: tuple = (64, 64)
    mode: str = "apu"
    self_attn: bool = True
    temporal_attn: bool = True
    key_aware: bool = True
    disentangle: bool = True
    per_layer_supervision: bool = True
    grid_radius: int = 1
    ffn_mult: int = 2

    def __post_init__(self):
        self.image_size = tuple(int(x) for x in self.image_size)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_decoder < 1:
            raise ConfigError("need at least one decoder layer")
        if self.n_encoder < 0 or self.window < 1 or self.grid_radius < 0 or self.ffn_mult < 1:
            raise ConfigError("encoder layers, window, grid radius and ffn width out of range")
        if self.d % self.n_heads or self.d % 4:
            raise ConfigError(f"d={self.d} must be divisible by 4 and by n_heads={self.n_heads}")
        if not 1 <= self.n_levels <= len(STRIDES):
            raise ConfigError(f"n_levels must be in 1..{len(STRIDES)}")
        if self.n_points < 1:
            raise ConfigError("n_points must be >= 1")
        if len(self.image_size) != 2:
            raise ConfigError("image_size is (H, W)")

    @property
    def strides(self):
        return STRIDES[:self.n_levels]

    @property
    def uses_apu(self) -> bool:
        return self.mode == "apu"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def save(self, path):
        write_keyvalue(path, self)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return coerce_fields(cls, read_keyvalue(path))


# --------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Fresh parameters for ``cfg``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    d, h, L, K = cfg.d, cfg.n_heads, cfg.n_levels, cfg.n_points
    P = {}

    chans = (3, *BACKBONE_CHANNELS, d)
    for i in range(3):
        fan = chans[i] * 9
        P[f"bb.conv{i}.W"] = (rng.uniform(-1, 1, (chans[i + 1], chans[i], 3, 3))
                              * np.sqrt(6.0 / fan)).astype(dtype)
        P[f"bb.conv{i}.b"] = np.zeros(chans[i + 1], dtype)
    for lvl, c in enumerate((BACKBONE_CHANNELS[1], d)[:L]):
        P[f"bb.proj{lvl}.W"], P[f"bb.proj{lvl}.b"] = init_linear(rng, c, d, dtype)

    P["enc.level_embed"] = (rng.normal(size=(L, d)) * 0.1).astype(dtype)
    for j in range(cfg.n_encoder):
        pre = f"enc.{j}"
        _init_ln(P, f"{pre}.ln1", d, dtype)
        P.update(_init_deform(rng, cfg, key_aware=False, with_dis=False, dtype=dtype).to_flat(f"{pre}.attn"))
        _init_ln(P, f"{pre}.ln2", d, dtype)
        P.update(MlpParams.init(rng, [d, cfg.ffn_mult * d, d], dtype).to_flat(f"{pre}.ffn"))

    P.update(MlpParams.init(rng, [L * d, d, d], dtype).to_flat("qinit"))

    n_cost = L * (2 * cfg.grid_radius + 1) ** 2
    for j in range(cfg.n_decoder):
        pre = f"dec.{j}"
        if cfg.self_attn:
            _init_ln(P, f"{pre}.ln_sa", d, dtype)
            P.update(MhaParams.init(rng, d, h, dtype).to_flat(f"{pre}.sa"))
        if cfg.temporal_attn:
            _init_ln(P, f"{pre}.ln_ta", d, dtype)
            P.update(MhaParams.init(rng, d, h, dtype).to_flat(f"{pre}.ta"))
        if cfg.mode == "cost_volume_baseline":
            _init_ln(P, f"{pre}.ln_cv", d, dtype)
            P.update(MlpParams.init(rng, [d + n_cost, d, d], dtype, zero_last=True).to_flat(f"{pre}.cv"))
        _init_ln(P, f"{pre}.ln_ca", d, dtype)
        with_dis = cfg.uses_apu and cfg.disentangle
        P.update(_init_deform(rng, cfg, cfg.key_aware, with_dis, dtype).to_flat(f"{pre}.ca"))
        _init_ln(P, f"{pre}.ln_ff", d, dtype)
        P.update(MlpParams.init(rng, [d, cfg.ffn_mult * d, d], dtype).to_flat(f"{pre}.ffn"))
        _init_ln(P, f"{pre}.ln_pos", d, dtype)
        P.update(MlpParams.init(rng, [d, d, 2], dtype, zero_last=True).to_flat(f"{pre}.pos"))

    _init_ln(P, "vis.ln", d, dtype)
    P.update(MlpParams.init(rng, [d, d, 1], dtype).to_flat("vis.mlp"))
    return P


def _init_ln(P, prefix, d, dtype):
    P[f"{prefix}.g"] = np.ones(d, dtype)
    P[f"{prefix}.b"] = np.zeros(d, dtype)


def _init_deform(rng, cfg, key_aware, with_dis, dtype):
    d, h, L, K = cfg.d, cfg.n_heads, cfg.n_levels, cfg.n_points
    n = h * L * K
    # offsets start on a small ring (a few cells at the finest scale), one
    # direction per head, growing with the point index
    ring = np.zeros((h, L, K, 2))
    base_cell = 1.0 / (cfg.image_size[1] / STRIDES[0])
    for hi in range(h):
        ang = 2 * np.pi * hi / h
        for k in range(K):
            ring[hi, :, k] = (k + 1) * base_cell * np.array([np.cos(ang), np.sin(ang)])
    vw, vb = init_linear(rng, d, d, dtype)
    ow, ob = init_linear(rng, d, d, dtype)
    kw = dict(offset_w=(uniform_init(rng, (2 * n, d), d, dtype) * 0.01).astype(dtype),
              offset_b=ring.reshape(-1).astype(dtype), value_w=vw, value_b=vb,
              output_w=ow, output_b=ob, n_heads=h, n_levels=L, n_points=K)
    if key_aware:
        kw["query_w"], kw["query_b"] = init_linear(rng, d, d, dtype)
    else:
        kw["logit_w"] = np.zeros((n, d), dtype)
        kw["logit_b"] = np.zeros(n, dtype)
    if with_dis:
        # residual z + mlp(z) with a zero last layer: identity at init
        kw["disentangler"] = MlpParams.init(rng, [L * K, L * K, L * K], dtype, zero_last=True)
    return DeformParams(**kw)


def _ln(P, prefix):
    return P[f"{prefix}.g"], P[f"{prefix}.b"]


def _deform(P, prefix, cfg):
    return DeformParams.from_flat(P, prefix, cfg.n_heads, cfg.n_levels, cfg.n_points)


def _acc(G, key, value):
    if key in G:
        G[key] = G[key] + value
    else:
        G[key] = value


def _acc_mlp(G, prefix, grads: MlpParams):
    for k, v in grads.to_flat(prefix).items():
        _acc(G, k, v)


def _acc_named(G, prefix, grads: dict):
    for k, v in grads.items():
        _acc(G, f"{prefix}.{k}", v)


def _acc_ln(G, prefix, dgamma, dbeta):
    _acc(G, f"{prefix}.g", dgamma)
    _acc(G, f"{prefix}.b", dbeta)


# --------------------------------------------------------------------------
# fixed encodings


def point_encoding(points: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal encoding of normalized points (..., 2) -> (..., d)."""
    n = d // 4
    freqs = np.pi * np.geomspace(1.0, 32.0, n)
    ang = points[..., :, None] * freqs  # (..., 2, n)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(*points.shape[:-1], d).astype(points.dtype, copy=False)


def point_encoding_backward(points: np.ndarray, d: int, denc: np.ndarray) -> np.ndarray:
    n = d // 4
    freqs = np.pi * np.geomspace(1.0, 32.0, n)
    ang = points[..., :, None] * freqs
    g = denc.reshape(*points.shape[:-1], 2, 2 * n)
    return ((g[..., :n] * np.cos(ang) - g[..., n:] * np.sin(ang)) * freqs).sum(-1)


def time_encoding(n_frames: int, d: int, dtype) -> np.ndarray:
    t = np.arange(n_frames, dtype=np.float64)[:, None]
    freqs = 1.0 / (100.0 ** (np.arange(d // 2) / (d // 2)))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], -1).astype(dtype)


def cell_centres(h: int, w: int, dtype=np.float64) -> np.ndarray:
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], -1).astype(dtype)


# --------------------------------------------------------------------------
# backbone


def conv3x3_s2_forward(x, w, b):
    """3x3 convolution, stride 2, zero padding 1.  ``x`` (B, C, H, W)."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"stride-2 convolution needs even sizes, got {H}x{W}")
    ho, wo = H // 2, W // 2
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, ho, wo, C, 3, 3), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[..., ki, kj] = xp[:, :, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2].transpose(0, 2, 3, 1)
    cols = cols.reshape(B, ho, wo, C * 9)
    y = linear(w.reshape(w.shape[0], -1), b, cols)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), (cols, x.shape, w.shape)


def conv3x3_s2_backward(cache, dy, w, need_input=True):
    cols, xshape, wshape = cache
    B, C, H, W = xshape
    dyt = dy.transpose(0, 2, 3, 1)
    dcols, dw, db = linear_backward(w.reshape(wshape[0], -1), cols, dyt)
    dx = None
    if need_input:
        ho, wo = H // 2, W // 2
        dcols = dcols.reshape(B, ho, wo, C, 3, 3)
        dxp = np.zeros((B, C, H + 2, W + 2), dtype=dy.dtype)
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2] += dcols[..., ki, kj].transpose(0, 3, 1, 2)
        dx = dxp[:, :, 1:-1, 1:-1]
    return dx, dw.reshape(wshape), db


def _pointwise(w, b, x):
    """1x1 convolution on (B, C, H, W)."""
    y = linear(w, b, x.transpose(0, 2, 3, 1))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _pointwise_backward(w, x, dy):
    dx, dw, db = linear_backward(w, x.transpose(0, 2, 3, 1), dy.transpose(0, 2, 3, 1))
    return dx.transpose(0, 3, 1, 2), dw, db


def backbone_forward(frames, P, cfg: ModelConfig):
    """Frames (B, 3, H, W) in [0, 1] -> list of (B, d, H/s, W/s) for each stride."""
    x = frames - np.asarray(0.5, frames.dtype)
    acts, caches = [], []
    for i in range(3):
        z, c = conv3x3_s2_forward(x, P[f"bb.conv{i}.W"], P[f"bb.conv{i}.b"])
        caches.append((c, z))
        x = relu(z)
        acts.append(x)
    sources = (acts[1], acts[2])[:cfg.n_levels]
    levels = [_pointwise(P[f"bb.proj{i}.W"], P[f"bb.proj{i}.b"], s) for i, s in enumerate(sources)]
    return levels, (caches, sources)


def backbone_backward(cache, dlevels, P, cfg, G):
    caches, sources = cache
    dacts = [None, None, None]
    for i, (src, dl) in enumerate(zip(sources, dlevels)):
        dsrc, dw, db = _pointwise_backward(P[f"bb.proj{i}.W"], src, dl)
        _acc(G, f"bb.proj{i}.W", dw)
        _acc(G, f"bb.proj{i}.b", db)
        dacts[i + 1] = dsrc
    dnext = None
    for i in reversed(range(3)):
        dact = dacts[i]
        if dnext is not None:
            dact = dnext if dact is None else dact + dnext
        if dact is None:
            dnext = None
            continue
        c, z = caches[i]
        dz = relu_backward(z, dact)
        dnext, dw, db = conv3x3_s2_backward(c, dz, P[f"bb.conv{i}.W"], need_input=i > 0)
        _acc(G, f"bb.conv{i}.W", dw)
        _acc(G, f"bb.conv{i}.b", db)


# --------------------------------------------------------------------------
# encoder


def _encoder_geometry(sizes, cfg, dtype):
    refs = np.concatenate([cell_centres(h, w, dtype) for h, w in sizes])
    level_id = np.concatenate([np.full(h * w, i) for i, (h, w) in enumerate(sizes)])
    return refs, level_id


def encoder_forward(levels, P, cfg: ModelConfig):
    if cfg.n_encoder == 0:
        return levels, None
    mem, sizes = attention._levels_to_memory(levels)
    B, n_cells, d = mem.shape
    refs, level_id = _encoder_geometry(sizes, cfg, mem.dtype)
    pos = point_encoding(refs, d) + P["enc.level_embed"][level_id]
    ref = np.broadcast_to(refs, (B, n_cells, 2))
    caches = []
    x = mem
    for j in range(cfg.n_encoder):
        pre = f"enc.{j}"
        y, c1 = layer_norm_forward(x, *_ln(P, f"{pre}.ln1"))
        dp = _deform(P, f"{pre}.attn", cfg)
        out, cd = attention.deform_attn_forward(y + pos, ref, attention._memory_to_levels(y, sizes),
                                                dp, key_aware=False)
        x = x + out.delta_f
        y2, c2 = layer_norm_forward(x, *_ln(P, f"{pre}.ln2"))
        ff, cf = mlp_forward(MlpParams.from_flat(P, f"{pre}.ffn"), y2)
        x = x + ff
        caches.append((c1, cd, c2, cf))
    return attention._memory_to_levels(x, sizes), (caches, sizes, level_id)


def encoder_backward(cache, dlevels, P, cfg, G):
    if cache is None:
        return dlevels
    caches, sizes, level_id = cache
    dx, _ = attention._levels_to_memory(dlevels)
    L = len(sizes)
    for j in reversed(range(cfg.n_encoder)):
        pre = f"enc.{j}"
        c1, cd, c2, cf = caches[j]
        dy2, gf = mlp_backward(MlpParams.from_flat(P, f"{pre}.ffn"), cf, dx)
        _acc_mlp(G, f"{pre}.ffn", gf)
        ddx, dg, db = layer_norm_backward(c2, dy2)
        _acc_ln(G, f"{pre}.ln2", dg, db)
        dx = dx + ddx
        dp = _deform(P, f"{pre}.attn", cfg)
        dq, _, dlv, gd = attention.deform_attn_backward(cd, dp, dx)
        _acc_named(G, f"{pre}.attn", gd)
        dmem_lv, _ = attention._levels_to_memory(dlv)
        dy = dq + dmem_lv
        dlevel = np.stack([dq[:, level_id == i].sum(axis=(0, 1)) for i in range(L)])
        _acc(G, "enc.level_embed", dlevel)
        ddx, dg, db = layer_norm_backward(c1, dy)
        _acc_ln(G, f"{pre}.ln1", dg, db)
        dx = dx + ddx
    return attention._memory_to_levels(dx, sizes)


def pyramid_forward(frames, P, cfg: ModelConfig):
    """Batched backbone + encoder: frames (B, 3, H, W) -> per-scale (B, d, h, w)."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"frames must be B x 3 x H x W, got {frames.shape}")
    H, W = frames.shape[2:]
    top = 2 ** 3
    if H % top or W % top:
        raise ShapeError(f"image size {H}x{W} must be divisible by {top}")
    frames = frames.astype(P["qinit.0.W"].dtype, copy=False)
    raw, cb = backbone_forward(frames, P, cfg)
    levels, ce = encoder_forward(raw, P, cfg)
    return levels, (cb, ce)


def pyramid_backward(cache, dlevels, P, cfg, G):
    cb, ce = cache
    draw = encoder_backward(ce, dlevels, P, cfg, G)
    backbone_backward(cb, draw, P, cfg, G)


def build_feature_pyramid(image, params, cfg: ModelConfig) -> FeaturePyramid:
    """Feature pyramid of one (3, H, W) image."""
    image = np.asarray(image)
    levels, _ = pyramid_forward(image[None], params, cfg)
    return FeaturePyramid.from_arrays([lv[0] for lv in levels], cfg.strides, image.shape[1:])


def _levels_of(pyrs):
    return [np.stack([p.maps[i].data for p in pyrs]) for i in range(len(pyrs[0].maps))]


# --------------------------------------------------------------------------
# point queries


@dataclass
class QuerySeeds:
    """Where each point's query comes from in a window.

    A *fresh* point starts at window frame ``frame[i]`` and position
    ``xy[i]``; its feature is sampled from that frame's pyramid.  A handed-off
    point starts at frame 0 with the given ``feat[i]``.
    """

    frame: np.ndarray       # (N,) int
    xy: np.ndarray          # (N, 2)
    fresh: np.ndarray       # (N,) bool
    feat: np.ndarray | None = None  # (N, d), rows of fresh points ignored

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=np.int64).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.fresh = np.asarray(self.fresh, dtype=bool).reshape(-1)
        n = len(self.frame)
        if self.xy.shape[0] != n or self.fresh.shape[0] != n:
            raise ShapeError("seed arrays disagree on point count")
        if not np.all(self.fresh) and (self.feat is None or len(self.feat) != n):
            raise ShapeError("handed-off points need features")
        if not np.all(np.isfinite(self.xy)):
            raise ValidationError("seed positions must be finite")

    @property
    def n_points(self) -> int:
        return len(self.frame)

    @classmethod
    def starts(cls, frame, xy):
        frame = np.asarray(frame, dtype=np.int64).reshape(-1)
        return cls(frame, xy, np.ones(len(frame), bool))

    @classmethod
    def handoff(cls, feat, xy):
        feat = np.array(feat, copy=True)
        return cls(np.zeros(len(feat), np.int64), np.array(xy, copy=True),
                   np.zeros(len(feat), bool), feat)


@dataclass
class PointQueries:
    """Per-frame query state: content ``f`` (Wn, N, d), position ``l`` (Wn, N, 2)."""

    f: np.ndarray
    l: np.ndarray
    emerged: np.ndarray  # (Wn, N) bool


def _prepare_forward(levels, seeds: QuerySeeds, P, cfg):
    Wn = levels[0].shape[0]
    dtype = levels[0].dtype
    N = seeds.n_points
    if np.any(seeds.frame < 0) or np.any(seeds.frame >= Wn):
        raise ValidationError(f"start frames must lie in [0, {Wn})")
    xy = seeds.xy.astype(dtype)
    f0 = np.zeros((N, cfg.d), dtype)
    cache = None
    idx = np.flatnonzero(seeds.fresh)
    if not np.all(seeds.fresh):
        f0[~seeds.fresh] = seeds.feat[~seeds.fresh]
    if len(idx):
        feats, plans = [], []
        for lv in levels:
            _, c, h, w = lv.shape
            bank = lv.transpose(0, 2, 3, 1).reshape(Wn * h * w, c)
            plan = make_plan(xy[idx], h, w, seeds.frame[idx] * h * w, n_rows=Wn * h * w)
            vals, corners = plan_gather(plan, bank)
            feats.append(vals)
            plans.append((plan, corners, lv.shape))
        qp = MlpParams.from_flat(P, "qinit")
        fe, cm = mlp_forward(qp, np.concatenate(feats, -1))
        f0[idx] = fe
        cache = (idx, plans, cm)
    t = np.arange(Wn)[:, None]
    q = PointQueries(f=np.broadcast_to(f0, (Wn, N, cfg.d)).copy(),
                     l=np.broadcast_to(xy, (Wn, N, 2)).copy(),
                     emerged=t >= seeds.frame[None, :])
    return q, cache


def _prepare_backward(cache, df, P, G, dlevels):
    if cache is None:
        return
    idx, plans, cm = cache
    dfe = df.sum(axis=0)[idx]
    dfeat, gm = mlp_backward(MlpParams.from_flat(P, "qinit"), cm, dfe)
    _acc_mlp(G, "qinit", gm)
    start = 0
    for i, (plan, corners, shape) in enumerate(plans):
        Wn, c, h, w = shape
        dbank, _ = plan_backward(plan, corners, dfeat[:, start:start + c])
        dlevels[i] = dlevels[i] + dbank.reshape(Wn, h, w, c).transpose(0, 3, 1, 2)
        start += c


def prepare_point_queries(pyrs, starts, params, cfg: ModelConfig) -> PointQueries:
    """Initial queries for a window given per-frame pyramids and point starts.

    ``starts`` is a sequence of ``(frame, (x, y))`` pairs or a :class:`QuerySeeds`.
    """
    seeds = starts if isinstance(starts, QuerySeeds) else _seeds_from_pairs(starts)
    if not pyrs:
        raise ValidationError("need at least one frame")
    q, _ = _prepare_forward(_levels_of(pyrs), seeds, params, cfg)
    return q


def _seeds_from_pairs(pairs):
    pairs = list(pairs)
    frames = np.array([int(e) for e, _ in pairs], dtype=np.int64)
    xy = np.array([tuple(p) for _, p in pairs], dtype=np.float64).reshape(-1, 2)
    return QuerySeeds.starts(frames, xy)


# --------------------------------------------------------------------------
# decoder


@dataclass
class LayerRecord:
    positions: np.ndarray      # (Wn, N, 2) after the position head
    apu_positions: np.ndarray  # (Wn, N, 2) after APU, before the head
    content_weights: np.ndarray | None = None   # (Wn, N, h, L*K)
    position_weights: np.ndarray | None = None  # (Wn, N, h, L*K)


def decoder_layer_forward(F, l, emerged, levels, cv_maps, P, cfg: ModelConfig, j: int):
    """One decoder layer on queries ``F`` (Wn, N, d) at constant positions ``l``."""
    pre = f"dec.{j}"
    d = cfg.d
    cache = {"l": l}
    pe = point_encoding(l, d)
    if cfg.self_attn:
        y, c = layer_norm_forward(F, *_ln(P, f"{pre}.ln_sa"))
        qk = y + pe
        out, cm = attention.multihead_attention_forward(
            qk, qk, y, MhaParams.from_flat(P, f"{pre}.sa", cfg.n_heads), key_mask=emerged)
        F = F + out
        cache["sa"] = (c, cm)
    if cfg.temporal_attn:
        y, c = layer_norm_forward(F, *_ln(P, f"{pre}.ln_ta"))
        te = time_encoding(F.shape[0], d, F.dtype)[:, None, :]
        qk = np.swapaxes(y + pe + te, 0, 1)
        out, cm = attention.multihead_attention_forward(
            qk, qk, np.swapaxes(y, 0, 1), MhaParams.from_flat(P, f"{pre}.ta", cfg.n_heads),
            key_mask=emerged.T)
        F = F + np.swapaxes(out, 0, 1)
        cache["ta"] = (c, cm)
    if cfg.mode == "cost_volume_baseline":
        y, c = layer_norm_forward(F, *_ln(P, f"{pre}.ln_cv"))
        out, ca = attention.aggregate_cost_forward(
            y, l, cv_maps, MlpParams.from_flat(P, f"{pre}.cv"), cfg.grid_radius, 1.0 / np.sqrt(d))
        F = F + out
        cache["cv"] = (c, ca)

    y, c = layer_norm_forward(F, *_ln(P, f"{pre}.ln_ca"))
    dp = _deform(P, f"{pre}.ca", cfg)
    out, cd = attention.deform_attn_forward(y, l, levels, dp, key_aware=cfg.key_aware)
    F = F + out.delta_f
    cache["ca"] = (c, cd)
    rec = LayerRecord(None, None, content_weights=out.weights)
    if cfg.uses_apu:
        dis = dp.disentangler if cfg.disentangle else None
        delta, cu = attention.apu_forward(out.logits, out.offsets, dis, out.scale)
        l_apu = l + delta
        cache["apu"] = cu
        rec.position_weights = cu[0]
    else:
        l_apu = l

    y, c = layer_norm_forward(F, *_ln(P, f"{pre}.ln_ff"))
    ff, cf = mlp_forward(MlpParams.from_flat(P, f"{pre}.ffn"), y)
    F = F + ff
    cache["ff"] = (c, cf)

    y, c = layer_norm_forward(F, *_ln(P, f"{pre}.ln_pos"))
    dl, cp = mlp_forward(MlpParams.from_flat(P, f"{pre}.pos"), y)
    l_out = l_apu + dl
    cache["pos"] = (c, cp)
    check_finite(F, f"decoder layer {j} features")
    check_finite(l_out, f"decoder layer {j} positions")
    rec.positions, rec.apu_positions = l_out, l_apu
    return F, rec, cache


def decoder_layer_backward(cache, dF, dl_apu, dl_out, levels_grad, dcv, P, cfg, j, G):
    """Backward of :func:`decoder_layer_forward`.

    Returns gradients w.r.t. the layer's input features and positions.
    """
    pre = f"dec.{j}"
    l = cache["l"]
    dpe = np.zeros(l.shape[:-1] + (cfg.d,), dtype=dF.dtype)
    c, cp = cache["pos"]
    dy, gm = mlp_backward(MlpParams.from_flat(P, f"{pre}.pos"), cp, dl_out)
    _acc_mlp(G, f"{pre}.pos", gm)
    ddF, dg, db = layer_norm_backward(c, dy)
    _acc_ln(G, f"{pre}.ln_pos", dg, db)
    dF = dF + ddF
    dl_apu = dl_apu + dl_out
    dl = dl_apu.copy()

    c, cf = cache["ff"]
    dy, gm = mlp_backward(MlpParams.from_flat(P, f"{pre}.ffn"), cf, dF)
    _acc_mlp(G, f"{pre}.ffn", gm)
    ddF, dg, db = layer_norm_backward(c, dy)
    _acc_ln(G, f"{pre}.ln_ff", dg, db)
    dF = dF + ddF

    dp = _deform(P, f"{pre}.ca", cfg)
    dlogits = doffsets = None
    if "apu" in cache:
        dis = dp.disentangler if cfg.disentangle else None
        dlogits, doffsets, gdis = attention.apu_backward(cache["apu"], dl_apu, dis)
        if gdis is not None:
            _acc_mlp(G, f"{pre}.ca.dis", gdis)
    c, cd = cache["ca"]
    dy, dref, dlv, gd = attention.deform_attn_backward(cd, dp, dF, dlogits, doffsets)
    dl += dref
    _acc_named(G, f"{pre}.ca", gd)
    for i, g in enumerate(dlv):
        levels_grad[i] = levels_grad[i] + g
    ddF, dg, db = layer_norm_backward(c, dy)
    _acc_ln(G, f"{pre}.ln_ca", dg, db)
    dF = dF + ddF

    if "cv" in cache:
        c, ca = cache["cv"]
        dy, dlc, dmaps, gm = attention.aggregate_cost_backward(ca, dF, MlpParams.from_flat(P, f"{pre}.cv"))
        dl += dlc
        _acc_mlp(G, f"{pre}.cv", gm)
        for i, g in enumerate(dmaps):
            dcv[i] = dcv[i] + g
        ddF, dg, db = layer_norm_backward(c, dy)
        _acc_ln(G, f"{pre}.ln_cv", dg, db)
        dF = dF + ddF

    if "ta" in cache:
        c, cm = cache["ta"]
        dqk, dk, dv, gm = attention.multihead_attention_backward(
            cm, np.swapaxes(dF, 0, 1), MhaParams.from_flat(P, f"{pre}.ta", cfg.n_heads))
        _acc_named(G, f"{pre}.ta", gm)
        dy = np.swapaxes(dqk + dk + dv, 0, 1)
        dpe += np.swapaxes(dqk + dk, 0, 1)
        ddF, dg, db = layer_norm_backward(c, dy)
        _acc_ln(G, f"{pre}.ln_ta", dg, db)
        dF = dF + ddF

    if "sa" in cache:
        c, cm = cache["sa"]
        dqk, dk, dv, gm = attention.multihead_attention_backward(
            cm, dF, MhaParams.from_flat(P, f"{pre}.sa", cfg.n_heads))
        _acc_named(G, f"{pre}.sa", gm)
        ddF, dg, db = layer_norm_backward(c, dqk + dk + dv)
        _acc_ln(G, f"{pre}.ln_sa", dg, db)
        dF = dF + ddF
        dpe += dqk + dk
    if "sa" in cache or "ta" in cache:
        dl += point_encoding_backward(l, cfg.d, dpe)
    return dF, dl


def decoder_layer(queries: PointQueries, pyrs, params, cfg: ModelConfig, j: int = 0,
                  cost_volume=None):
    """Apply decoder layer ``j``; returns ``(updated queries, LayerRecord)``."""
    levels = _levels_of(pyrs) if isinstance(pyrs[0], FeaturePyramid) else list(pyrs)
    _check_queries(queries)
    F, rec, _ = decoder_layer_forward(queries.f, queries.l, queries.emerged, levels,
                                      cost_volume, params, cfg, j)
    return PointQueries(F, rec.positions.copy(), queries.emerged.copy()), rec


def _check_queries(q: PointQueries):
    if q.f.ndim != 3 or q.l.shape != q.f.shape[:2] + (2,) or q.emerged.shape != q.f.shape[:2]:
        raise ShapeError("queries must be (Wn, N, d) content with matching positions and flags")


def visibility_head(f_final, params) -> np.ndarray:
    """Visibility probability from final content features (..., d)."""
    return sigmoid(_vis_logits(f_final, params)[0])


def _vis_logits(F, P):
    y, c = layer_norm_forward(F, *_ln(P, "vis.ln"))
    z, cm = mlp_forward(MlpParams.from_flat(P, "vis.mlp"), y)
    return z[..., 0], (c, cm)


# --------------------------------------------------------------------------
# full window


@dataclass
class LayerOutputs:
    """Everything a window forward produces.

    ``positions[j]`` is layer ``j``'s output; ``positions[-1]`` is the
    prediction.  ``apu_positions[j]`` is the position after the attention
    update and before the position head (equal to the layer input when the
    update is disabled).
    """

    positions: np.ndarray       # (D, Wn, N, 2)
    apu_positions: np.ndarray   # (D, Wn, N, 2)
    features: np.ndarray        # (Wn, N, d)
    vis_logits: np.ndarray      # (Wn, N)
    emerged: np.ndarray         # (Wn, N)
    records: list = field(default_factory=list, repr=False)
    cache: object = field(default=None, repr=False)

    @property
    def final_positions(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def visibility(self) -> np.ndarray:
        return sigmoid(self.vis_logits)

    @property
    def n_layers(self) -> int:
        return self.positions.shape[0]


def forward_window(frames, seeds: QuerySeeds, params, cfg: ModelConfig,
                   keep_cache: bool = False) -> LayerOutputs:
    """Run the network on a window of frames (Wn, 3, H, W)."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ShapeError(f"frames must be Wn x 3 x H x W with Wn >= 1, got {frames.shape}")
    if frames.shape[0] > cfg.window:
        raise ShapeError(f"{frames.shape[0]} frames exceed the window length {cfg.window}")
    if isinstance(seeds, (list, tuple)):
        seeds = _seeds_from_pairs(seeds)
    levels, cpyr = pyramid_forward(frames, params, cfg)
    Wn, N, D = frames.shape[0], seeds.n_points, cfg.n_decoder
    dtype = levels[0].dtype
    q, cq = _prepare_forward(levels, seeds, params, cfg)
    F, l = q.f, q.l

    cv_maps, ccv = None, None
    if N and cfg.mode == "cost_volume_baseline":
        cv_maps, ccv = attention.cost_volume_forward(F, levels)

    records, caches = [], []
    if N:
        for j in range(D):
            F, rec, cache = decoder_layer_forward(F, l, q.emerged, levels, cv_maps, params, cfg, j)
            records.append(rec)
            if keep_cache:
                caches.append(cache)
            l = rec.positions
        vis, cvis = _vis_logits(F, params)
        positions = np.stack([r.positions for r in records])
        apu_positions = np.stack([r.apu_positions for r in records])
    else:
        vis, cvis = np.zeros((Wn, 0), dtype), None
        positions = apu_positions = np.zeros((D, Wn, 0, 2), dtype)
    cache = (cpyr, cq, ccv, caches, cvis, levels) if keep_cache else None
    return LayerOutputs(positions, apu_positions, F, vis, q.emerged, records, cache)


def backward_window(outputs: LayerOutputs, d_positions, d_apu_positions, d_vis_logits,
                    params, cfg: ModelConfig) -> dict:
    """Parameter gradients given gradients of the window outputs."""
    if outputs.cache is None:
        raise ValidationError("forward_window was run without keep_cache")
    cpyr, cq, ccv, caches, cvis, levels = outputs.cache
    G = {}
    dlevels = [np.zeros_like(lv) for lv in levels]
    if caches:
        c, cm = cvis
        dy, gm = mlp_backward(MlpParams.from_flat(params, "vis.mlp"), cm, d_vis_logits[..., None])
        _acc_mlp(G, "vis.mlp", gm)
        dF, dg, db = layer_norm_backward(c, dy)
        _acc_ln(G, "vis.ln", dg, db)
        dcv = None
        if ccv is not None:
            dcv = [np.zeros(lv.shape[:1] + outputs.features.shape[1:2] + lv.shape[2:], lv.dtype)
                   for lv in levels]
        dl = np.zeros_like(d_positions[0])
        for j in reversed(range(len(caches))):
            dF, dl = decoder_layer_backward(caches[j], dF, d_apu_positions[j], d_positions[j] + dl,
                                            dlevels, dcv, params, cfg, j, G)
        if ccv is not None:
            dF0, dlv = attention.cost_volume_backward(ccv, dcv)
            dF = dF + dF0
            for i, g in enumerate(dlv):
                dlevels[i] = dlevels[i] + g
        _prepare_backward(cq, dF, params, G, dlevels)
    pyramid_backward(cpyr, dlevels, params, cfg, G)
    return {k: np.asarray(G.get(k, np.zeros_like(v)), dtype=v.dtype).reshape(v.shape)
            for k, v in params.items()}
