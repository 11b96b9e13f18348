"""Attention kernels and the cost-volume baseline.

Shapes use ``B`` for an outer batch (frames of a window), ``N`` for queries,
``h`` heads, ``L`` feature scales, ``K`` sampling points per scale and head.
Every ``*_forward`` returns ``(value, cache)``; the matching ``*_backward``
consumes the cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .numerics import (MlpParams, add_macs, check_finite, init_linear, linear,
                       linear_backward, mlp_backward, mlp_forward, softmax,
                       softmax_backward)
from .sampling import FeaturePyramid, make_plan, plan_backward, plan_gather

_DOT_CHUNK = 1 << 22


def channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dot product over the last axis with broadcasting.

    Attention logits and cost volumes both go through this helper so that
    equal inputs give bit-identical results.
    """
    return (a * b).sum(axis=-1)


# --------------------------------------------------------------------------
# dense multi-head attention


@dataclass
class MhaParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    n_heads: int

    _names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    @classmethod
    def init(cls, rng, d: int, n_heads: int, dtype=np.float32):
        if d % n_heads:
            raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
        arrays = []
        for _ in range(4):
            arrays.extend(init_linear(rng, d, d, dtype))
        return cls(*arrays, n_heads=n_heads)

    @classmethod
    def identity(cls, d: int, n_heads: int = 1, dtype=np.float64):
        eye, zero = np.eye(d, dtype=dtype), np.zeros(d, dtype=dtype)
        return cls(eye, zero, eye.copy(), zero.copy(), eye.copy(), zero.copy(),
                   eye.copy(), zero.copy(), n_heads=n_heads)

    def to_flat(self, prefix: str) -> dict:
        return {f"{prefix}.{n}": getattr(self, n) for n in self._names}

    @classmethod
    def from_flat(cls, params: dict, prefix: str, n_heads: int):
        return cls(*(params[f"{prefix}.{n}"] for n in cls._names), n_heads=n_heads)


def _split_heads(x, h):
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, h, d // h), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


_MASKED = -1e9


def multihead_attention_forward(q, k, v, params: MhaParams, key_mask=None):
    """``key_mask`` (..., n_k) marks usable keys; a row with no usable key
    falls back to uniform weights."""
    if k.shape[-2] == 0:
        raise ShapeError("attention needs at least one key")
    if k.shape[:-1] != v.shape[:-1] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"inconsistent q/k/v shapes {q.shape} {k.shape} {v.shape}")
    h = params.n_heads
    qp = linear(params.wq, params.bq, q)
    kp = linear(params.wk, params.bk, k)
    vp = linear(params.wv, params.bv, v)
    qh, kh, vh = _split_heads(qp, h), _split_heads(kp, h), _split_heads(vp, h)
    dh = qh.shape[-1]
    scale = 1.0 / np.sqrt(dh)
    add_macs(2 * qh.size * kh.shape[-2])
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale
    if key_mask is not None:
        scores = scores + np.where(key_mask, 0.0, _MASKED).astype(scores.dtype)[..., None, None, :]
    probs = softmax(scores, axis=-1)
    ctx = _merge_heads(probs @ vh)
    out = linear(params.wo, params.bo, ctx)
    return out, (q, k, v, qh, kh, vh, probs, ctx, scale)


def multihead_attention(q, k, v, params: MhaParams, key_mask=None) -> np.ndarray:
    """Scaled dot-product attention per head, concatenated and projected."""
    return multihead_attention_forward(q, k, v, params, key_mask)[0]


def multihead_attention_backward(cache, dout, params: MhaParams):
    """Return ``(dq, dk, dv, grads)`` with ``grads`` keyed like :class:`MhaParams`."""
    q, k, v, qh, kh, vh, probs, ctx, scale = cache
    h = params.n_heads
    g = {}
    dctx, g["wo"], g["bo"] = linear_backward(params.wo, ctx, dout)
    dctx_h = _split_heads(dctx, h)
    dprobs = dctx_h @ np.swapaxes(vh, -1, -2)
    dvh = np.swapaxes(probs, -1, -2) @ dctx_h
    dscores = softmax_backward(probs, dprobs) * scale
    dqh = dscores @ kh
    dkh = np.swapaxes(dscores, -1, -2) @ qh
    dq, g["wq"], g["bq"] = linear_backward(params.wq, q, _merge_heads(dqh))
    dk, g["wk"], g["bk"] = linear_backward(params.wk, k, _merge_heads(dkh))
    dv, g["wv"], g["bv"] = linear_backward(params.wv, v, _merge_heads(dvh))
    return dq, dk, dv, g


# --------------------------------------------------------------------------
# deformable attention


@dataclass
class DeformParams:
    """Parameters of one deformable cross-attention block.

    ``offset_w`` maps a query to ``n_heads * n_levels * n_points`` 2-D offsets
    in normalized image units.  Keys and values are the same sampled,
    value-projected features.  ``query_w`` is used by the key-aware variant,
    ``logit_w`` by the plain variant that predicts logits from the query.
    """

    offset_w: np.ndarray
    offset_b: np.ndarray
    value_w: np.ndarray
    value_b: np.ndarray
    output_w: np.ndarray
    output_b: np.ndarray
    n_heads: int
    n_levels: int
    n_points: int
    query_w: np.ndarray | None = None
    query_b: np.ndarray | None = None
    logit_w: np.ndarray | None = None
    logit_b: np.ndarray | None = None
    disentangler: MlpParams | None = None

    _names = ("offset_w", "offset_b", "value_w", "value_b", "output_w", "output_b",
              "query_w", "query_b", "logit_w", "logit_b")

    def __post_init__(self):
        if min(self.n_heads, self.n_levels, self.n_points) < 1:
            raise ShapeError("heads, levels and points must all be >= 1")
        d = self.output_w.shape[0]
        if d % self.n_heads:
            raise ShapeError(f"model dim {d} not divisible by {self.n_heads} heads")
        n_samples = self.n_heads * self.n_levels * self.n_points
        if self.offset_w.shape[0] != 2 * n_samples:
            raise ShapeError(f"offset projection yields {self.offset_w.shape[0]} values, "
                             f"need {2 * n_samples}")
        if self.disentangler is not None:
            lk = self.n_levels * self.n_points
            if self.disentangler.in_dim != lk or self.disentangler.out_dim != lk:
                raise ShapeError("disentangler must map L*K logits to L*K logits")

    @property
    def head_dim(self) -> int:
        return self.output_w.shape[0] // self.n_heads

    def to_flat(self, prefix: str) -> dict:
        out = {f"{prefix}.{n}": getattr(self, n) for n in self._names
               if getattr(self, n) is not None}
        if self.disentangler is not None:
            out.update(self.disentangler.to_flat(f"{prefix}.dis"))
        return out

    @classmethod
    def from_flat(cls, params: dict, prefix: str, n_heads: int, n_levels: int, n_points: int):
        kw = {n: params.get(f"{prefix}.{n}") for n in cls._names}
        dis = None
        if f"{prefix}.dis.0.W" in params:
            dis = MlpParams.from_flat(params, f"{prefix}.dis")
        return cls(**kw, n_heads=n_heads, n_levels=n_levels, n_points=n_points, disentangler=dis)


@dataclass
class DeformOutcome:
    delta_f: np.ndarray   # (..., d)
    logits: np.ndarray    # (..., h, L, K)
    offsets: np.ndarray   # (..., h, L, K, 2)
    weights: np.ndarray   # (..., h, L*K) softmax(logits * scale)
    scale: float
    delta_l: np.ndarray | None = None
    cache: tuple | None = field(default=None, repr=False)


def _levels_to_memory(levels):
    b, c = levels[0].shape[:2]
    sizes = [(lv.shape[2], lv.shape[3]) for lv in levels]
    for lv in levels:
        if lv.shape[:2] != (b, c):
            raise ShapeError("all feature levels must share batch and channel dims")
    mem = np.concatenate([lv.reshape(b, c, -1) for lv in levels], axis=2)
    return np.ascontiguousarray(mem.transpose(0, 2, 1)), sizes


def _memory_to_levels(mem, sizes):
    b, _, c = mem.shape
    out, start = [], 0
    for hh, ww in sizes:
        out.append(mem[:, start:start + hh * ww].transpose(0, 2, 1).reshape(b, c, hh, ww))
        start += hh * ww
    return out


def deform_attn_forward(x, ref, levels, params: DeformParams, key_aware: bool = True):
    """Batched deformable cross-attention.

    ``x`` (B, N, d) queries, ``ref`` (B, N, 2) reference points, ``levels`` a
    list of (B, C, H_l, W_l) feature maps.
    """
    B, N, d = x.shape
    h, L, K = params.n_heads, params.n_levels, params.n_points
    if len(levels) != L:
        raise ShapeError(f"expected {L} feature levels, got {len(levels)}")
    dh = d // h
    mem, sizes = _levels_to_memory(levels)
    n_cells = mem.shape[1]
    val = linear(params.value_w, params.value_b, mem)
    bank = np.ascontiguousarray(
        val.reshape(B, n_cells, h, dh).transpose(0, 2, 1, 3)).reshape(B * h * n_cells, dh)

    offsets = linear(params.offset_w, params.offset_b, x).reshape(B, N, h, L, K, 2)
    if not np.all(np.isfinite(offsets)):
        raise NumericError("non-finite sampling offsets")
    pos = ref[:, :, None, None, None, :] + offsets
    hs = np.array([s[0] for s in sizes])[:, None]
    ws = np.array([s[1] for s in sizes])[:, None]
    starts = np.concatenate([[0], np.cumsum([a * b for a, b in sizes])[:-1]])
    base = ((np.arange(B)[:, None, None, None, None] * h
             + np.arange(h)[None, None, :, None, None]) * n_cells
            + starts[None, None, None, :, None])
    plan = make_plan(pos, hs, ws, base, n_rows=B * h * n_cells)
    sampled, corners = plan_gather(plan, bank)  # (B, N, h, L, K, dh)

    q = None
    if key_aware:
        if params.query_w is None:
            raise ShapeError("key-aware attention needs a query projection")
        q = linear(params.query_w, params.query_b, x).reshape(B, N, h, dh)
        add_macs(sampled.size)
        logits = channel_dot(q[:, :, :, None, None, :], sampled)
        scale = 1.0 / np.sqrt(dh)
    else:
        if params.logit_w is None:
            raise ShapeError("plain deformable attention needs a logit projection")
        logits = linear(params.logit_w, params.logit_b, x).reshape(B, N, h, L, K)
        scale = 1.0
    weights = softmax((logits * scale).reshape(B, N, h, L * K), axis=-1)
    flat_sampled = sampled.reshape(B, N, h, L * K, dh)
    add_macs(sampled.size)
    agg = np.einsum("...k,...kc->...c", weights, flat_sampled).reshape(B, N, d)
    delta_f = linear(params.output_w, params.output_b, agg)
    check_finite(delta_f, "deformable attention output")
    cache = (x, mem, sizes, plan, sampled, corners, q, weights, agg, scale, key_aware)
    outcome = DeformOutcome(delta_f, logits, offsets, weights, scale, cache=cache)
    return outcome, cache


def deform_attn_backward(cache, params: DeformParams, d_delta_f, d_logits=None, d_offsets=None):
    """Return ``(dx, dref, dlevels, grads)``.

    ``d_logits``/``d_offsets`` carry gradients from consumers of the
    outcome's logits and offsets (the position update).
    """
    x, mem, sizes, plan, sampled, corners, q, weights, agg, scale, key_aware = cache
    B, N, d = x.shape
    h, L, K = params.n_heads, params.n_levels, params.n_points
    dh = d // h
    g = {}
    dagg, g["output_w"], g["output_b"] = linear_backward(params.output_w, agg, d_delta_f)
    dagg = dagg.reshape(B, N, h, 1, dh)
    flat_sampled = sampled.reshape(B, N, h, L * K, dh)
    dweights = np.einsum("...kc,...c->...k", flat_sampled, dagg[..., 0, :])
    dsampled = (weights[..., None] * dagg).reshape(B, N, h, L, K, dh)
    dlog = softmax_backward(weights, dweights).reshape(B, N, h, L, K) * scale
    if d_logits is not None:
        dlog = dlog + d_logits
    if key_aware:
        dq = np.einsum("bnhlk,bnhlkc->bnhc", dlog, sampled)
        dsampled = dsampled + dlog[..., None] * q[:, :, :, None, None, :]
        dx, g["query_w"], g["query_b"] = linear_backward(params.query_w, x, dq.reshape(B, N, d))
    else:
        dx, g["logit_w"], g["logit_b"] = linear_backward(params.logit_w, x,
                                                         dlog.reshape(B, N, h * L * K))
    dbank, dpos = plan_backward(plan, corners, dsampled)
    doff = dpos if d_offsets is None else dpos + d_offsets
    dx_off, g["offset_w"], g["offset_b"] = linear_backward(params.offset_w, x,
                                                           doff.reshape(B, N, -1))
    dx = dx + dx_off
    dref = dpos.sum(axis=(2, 3, 4))
    n_cells = mem.shape[1]
    dval = dbank.reshape(B, h, n_cells, dh).transpose(0, 2, 1, 3).reshape(B, n_cells, d)
    dmem, g["value_w"], g["value_b"] = linear_backward(params.value_w, mem, dval)
    return dx, dref, _memory_to_levels(dmem, sizes), g


def _pyramid_levels(pyr: FeaturePyramid):
    return [m.data[None] for m in pyr.maps]


def key_aware_deform_attn(f, l, pyr: FeaturePyramid, params: DeformParams,
                          key_aware: bool = True) -> DeformOutcome:
    """Deformable cross-attention of queries ``f`` (..., d) at ``l`` (..., 2).

    Logits are dot products between each query and the features sampled at
    ``l + offsets``; the softmax-weighted samples form the content update.
    """
    f = np.asarray(f)
    lead = f.shape[:-1]
    x = f.reshape(1, -1, f.shape[-1])
    ref = np.asarray(l, dtype=f.dtype).reshape(1, -1, 2)
    out, _ = deform_attn_forward(x, ref, _pyramid_levels(pyr), params, key_aware)
    h, L, K = params.n_heads, params.n_levels, params.n_points
    out.delta_f = out.delta_f.reshape(*lead, -1)
    out.logits = out.logits.reshape(*lead, h, L, K)
    out.offsets = out.offsets.reshape(*lead, h, L, K, 2)
    out.weights = out.weights.reshape(*lead, h, L * K)
    return out


# --------------------------------------------------------------------------
# attention-based position update


def apu_forward(logits, offsets, disentangler: MlpParams | None, scale: float):
    """Position delta from logits (..., h, L, K) and offsets (..., h, L, K, 2).

    Per head: softmax over the head's L*K points of the (optionally
    disentangled) scaled logits, used to average that head's offsets; the
    per-head deltas are then averaged.  The disentangler is residual:
    ``z + mlp(z)``.
    """
    *lead, h, L, K = logits.shape
    z = logits.reshape(*lead, h, L * K) * scale
    mcache = None
    if disentangler is not None:
        m, mcache = mlp_forward(disentangler, z)
        z = z + m
    w = softmax(z, axis=-1)
    s = offsets.reshape(*lead, h, L * K, 2)
    add_macs(2 * w.size)
    per_head = (w[..., None] * s).sum(axis=-2)
    delta = per_head.mean(axis=-2)
    return delta, (w, s, mcache, scale, logits.shape)


def apu_backward(cache, d_delta, disentangler: MlpParams | None):
    """Return ``(dlogits, doffsets, disentangler_grads)``."""
    w, s, mcache, scale, shape = cache
    h = shape[-3]
    dper = d_delta[..., None, :] / h
    dw = (dper[..., None, :] * s).sum(axis=-1)
    ds = (w[..., None] * dper[..., None, :]).reshape(*shape, 2)
    dz = softmax_backward(w, dw)
    gdis = None
    if disentangler is not None:
        dzm, gdis = mlp_backward(disentangler, mcache, dz)
        dz = dz + dzm
    return (dz * scale).reshape(shape), ds, gdis


def attention_position_update(out: DeformOutcome, params: DeformParams,
                              disentangle: bool = True) -> np.ndarray:
    """Delta for the query position from an attention outcome's logits and offsets."""
    dis = params.disentangler if disentangle else None
    delta, _ = apu_forward(out.logits, out.offsets, dis, out.scale)
    out.delta_l = delta
    return delta


# --------------------------------------------------------------------------
# cost volume (baseline path)


@dataclass
class CostVolume:
    maps: list  # per scale, (..., H, W)


def cost_volume_forward(f, levels):
    """``f`` (B, N, C) against ``levels`` [(B, C, H, W)] -> [(B, N, H, W)]."""
    B, N, C = f.shape
    out, cells_all = [], []
    for lv in levels:
        if lv.shape[:2] != (B, C):
            raise ShapeError(f"cost volume: feature dim {C} vs level {lv.shape}")
        hh, ww = lv.shape[2:]
        cells = np.ascontiguousarray(lv.reshape(B, C, hh * ww).transpose(0, 2, 1))
        add_macs(B * N * hh * ww * C)
        cv = np.empty((B, N, hh * ww), dtype=np.result_type(f, lv))
        step = max(1, _DOT_CHUNK // max(1, hh * ww * C))
        for i in range(0, N, step):
            cv[:, i:i + step] = channel_dot(f[:, i:i + step, None, :], cells[:, None])
        out.append(cv.reshape(B, N, hh, ww))
        cells_all.append(cells)
    return out, (f, cells_all, [lv.shape for lv in levels])


def cost_volume_backward(cache, dcv):
    f, cells_all, shapes = cache
    df = np.zeros_like(f)
    dlevels = []
    for cells, g, shape in zip(cells_all, dcv, shapes):
        B, N, hh, ww = g.shape
        g2 = g.reshape(B, N, hh * ww)
        df += g2 @ cells
        dcells = np.swapaxes(g2, 1, 2) @ f
        dlevels.append(np.swapaxes(dcells, 1, 2).reshape(shape))
    return df, dlevels


def compute_cost_volume(f, pyr: FeaturePyramid) -> CostVolume:
    """Dot product of ``f`` (..., d) with every cell of every scale."""
    f = np.asarray(f)
    lead = f.shape[:-1]
    cv, _ = cost_volume_forward(f.reshape(1, -1, f.shape[-1]), _pyramid_levels(pyr))
    return CostVolume([m.reshape(*lead, *m.shape[2:]) for m in cv])


def cost_grid(radius: int) -> np.ndarray:
    """Integer (dx, dy) cell offsets of a (2r+1)^2 grid, row-major in dy."""
    r = np.arange(-radius, radius + 1)
    gy, gx = np.meshgrid(r, r, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], -1)


def aggregate_cost_forward(f, l, cv_maps, params: MlpParams, radius: int, scale: float = 1.0):
    """Sample each query's own cost maps on a grid around ``l``; MLP over [f, c]."""
    if radius < 0:
        raise ShapeError("grid radius must be >= 0")
    f = np.asarray(f)
    lead = f.shape[:-1]
    Q = int(np.prod(lead, dtype=np.int64))
    lq = np.asarray(l, dtype=f.dtype).reshape(Q, 1, 2)
    grid = cost_grid(radius).astype(f.dtype)
    samples, plans = [], []
    for cv in cv_maps:
        hh, ww = cv.shape[-2:]
        bank = cv.reshape(Q * hh * ww, 1)
        pts = lq + grid[None] * np.array([1.0 / ww, 1.0 / hh], dtype=f.dtype)
        plan = make_plan(pts, hh, ww, (np.arange(Q) * hh * ww)[:, None], n_rows=Q * hh * ww)
        vals, corners = plan_gather(plan, bank)
        samples.append(vals[..., 0])
        plans.append((plan, corners, cv.shape))
    c = np.concatenate(samples, axis=-1) * scale
    inp = np.concatenate([f.reshape(Q, -1), c], axis=-1)
    out, mcache = mlp_forward(params, inp)
    return out.reshape(*lead, -1), (plans, mcache, f.shape, scale, lead)


def aggregate_cost_backward(cache, dout, params: MlpParams):
    """Return ``(df, dl, dcv_maps, mlp_grads)``."""
    plans, mcache, fshape, scale, lead = cache
    Q = int(np.prod(lead, dtype=np.int64))
    d = fshape[-1]
    dinp, gm = mlp_backward(params, mcache, dout.reshape(Q, -1))
    df = dinp[:, :d].reshape(fshape)
    dc = dinp[:, d:] * scale
    dl = np.zeros((Q, 2), dtype=dout.dtype)
    dcv, start = [], 0
    for plan, corners, shape in plans:
        n = plan.shape[-1]
        dbank, dpts = plan_backward(plan, corners, dc[:, start:start + n, None])
        dl += dpts.sum(axis=1)
        dcv.append(dbank.reshape(shape))
        start += n
    return df, dl.reshape(*lead, 2), dcv, gm


def aggregate_cost_baseline(f, l, cv: CostVolume, params: MlpParams, grid_radius: int,
                            scale: float = 1.0) -> np.ndarray:
    """``mlp(concat(f, c))`` with ``c`` the cost samples on a grid around ``l``."""
    return aggregate_cost_forward(f, l, cv.maps, params, grid_radius, scale)[0]
