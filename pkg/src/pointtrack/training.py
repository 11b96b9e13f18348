"""Losses, AdamW with an EMA shadow copy, and the training loop.

Loss over the valid (post-emergence) point-frames of a window::

    L = (lambda_pos * sum_j sum_{visible} |l^(j) - gt|_1
         + lambda_apu * sum_j sum_{visible} |l_apu^(j) - gt|_1
         + lambda_vis * sum_{valid} BCE(vis_logit, gt_vis)) / n_valid

Positions are only supervised where the ground-truth point is visible.  When
several windows form a batch, ``n_valid`` is the count over the whole batch,
so splitting a batch into micro-batches leaves the gradient unchanged.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, ValidationError
from .formats import coerce_fields, read_keyvalue, write_keyvalue
from .model import LayerOutputs, ModelConfig, QuerySeeds, backward_window, forward_window
from .numerics import bce_with_logits, bce_with_logits_backward
from .synthdata import GroundTruth


@dataclass
class LossConfig:
    lambda_pos: float = 1.0
    lambda_apu: float = 1.0
    lambda_vis: float = 1.0

    def __post_init__(self):
        if min(self.lambda_pos, self.lambda_apu, self.lambda_vis) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossValue:
    total: float
    pos: float
    apu: float
    vis: float

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(self.total + other.total, self.pos + other.pos,
                         self.apu + other.apu, self.vis + other.vis)


@dataclass
class LossGrads:
    positions: np.ndarray
    apu_positions: np.ndarray
    vis_logits: np.ndarray


def count_valid(emerged: np.ndarray) -> int:
    return int(np.asarray(emerged).sum())


def compute_loss(outputs: LayerOutputs, gt: GroundTruth, cfg: LossConfig,
                 supervise_apu: bool = True, norm: float | None = None):
    """Return ``(LossValue, LossGrads)`` for one window.

    ``gt`` holds the window slice, rows aligned with the queries: ``xy``
    (N, Wn, 2) and ``vis`` (N, Wn).  ``norm`` overrides the valid-count
    normaliser (used when a batch spans several windows).
    """
    D, Wn, N = outputs.positions.shape[:3]
    if gt.xy.shape != (N, Wn, 2) or gt.vis.shape != (N, Wn):
        raise ValidationError(f"ground truth {gt.xy.shape} does not match outputs ({N}, {Wn})")
    valid = outputs.emerged
    n = count_valid(valid) if norm is None else norm
    if n == 0:
        raise ValidationError("no valid point-frame to supervise")
    dtype = outputs.positions.dtype
    target = np.swapaxes(gt.xy, 0, 1).astype(dtype)
    vis = np.swapaxes(gt.vis, 0, 1)
    sup = (valid & vis)[..., None].astype(dtype)
    labels = vis.astype(dtype)

    def l1(pred):
        diff = pred - target
        return float((np.abs(diff) * sup).sum()), np.sign(diff) * sup

    pos = apu = 0.0
    g_pos = np.zeros_like(outputs.positions)
    g_apu = np.zeros_like(outputs.apu_positions)
    for j in range(D):
        v, g = l1(outputs.positions[j])
        pos += v
        g_pos[j] = g * (cfg.lambda_pos / n)
        if supervise_apu and cfg.lambda_apu:
            v, g = l1(outputs.apu_positions[j])
            apu += v
            g_apu[j] = g * (cfg.lambda_apu / n)
    vmask = valid.astype(dtype)
    bce = bce_with_logits(outputs.vis_logits, labels)
    vis_loss = float((bce * vmask).sum())
    g_vis = bce_with_logits_backward(outputs.vis_logits, labels, vmask * (cfg.lambda_vis / n))
    pos, apu, vis_loss = pos / n, apu / n, vis_loss / n
    total = cfg.lambda_pos * pos + cfg.lambda_apu * apu + cfg.lambda_vis * vis_loss
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss (pos={pos}, apu={apu}, vis={vis_loss})")
    return LossValue(total, pos, apu, vis_loss), LossGrads(g_pos, g_apu, g_vis.astype(dtype))


# --------------------------------------------------------------------------
# optimiser


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    clip_norm: float = 0.0
    warmup: int = 0
    step: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)
    ema: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, params: dict, **kw) -> "OptimState":
        st = cls(**kw)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        st.ema = {k: p.copy() for k, p in params.items()}
        return st

    def current_lr(self) -> float:
        if self.warmup and self.step <= self.warmup:
            return self.lr * self.step / self.warmup
        return self.lr


def adamw_update(params: dict, grads: dict, st: OptimState) -> None:
    """In-place AdamW step followed by the EMA update."""
    for k in params:
        if st.m[k].shape != params[k].shape:
            raise ValidationError(f"optimiser state for {k} has the wrong shape")
    st.step += 1
    scale = 1.0
    if st.clip_norm > 0:
        norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if norm > st.clip_norm:
            scale = st.clip_norm / norm
    lr = st.current_lr()
    c1 = 1 - st.beta1 ** st.step
    c2 = 1 - st.beta2 ** st.step
    for k, p in params.items():
        g = grads[k] * scale if scale != 1.0 else grads[k]
        m, v = st.m[k], st.v[k]
        m *= st.beta1
        m += (1 - st.beta1) * g
        v *= st.beta2
        v += (1 - st.beta2) * g * g
        if lr:
            upd = (m / c1) / (np.sqrt(v / c2) + st.eps)
            if p.ndim >= 2 and st.weight_decay:
                upd = upd + st.weight_decay * p
            p -= (lr * upd).astype(p.dtype)
        e = st.ema[k]
        e *= st.ema_decay
        e += (1 - st.ema_decay) * p


# --------------------------------------------------------------------------
# steps


@dataclass
class Sample:
    """One training window with row-aligned ground truth."""

    frames: np.ndarray   # (Wn, 3, H, W)
    seeds: QuerySeeds
    gt: GroundTruth      # xy (N, Wn, 2), vis (N, Wn)


def sample_from_video(frames, gt: GroundTruth, start: int, length: int, max_points=None, rng=None):
    """Window ``[start, start+length)`` with every point visible somewhere in it."""
    win = gt.window(start, start + length)
    idx = np.flatnonzero(win.vis.any(axis=1))
    if max_points is not None and len(idx) > max_points:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(idx, size=max_points, replace=False))
    win = win.subset(idx)
    first = np.argmax(win.vis, axis=1)
    seeds = QuerySeeds.starts(first, win.xy[np.arange(len(idx)), first])
    return Sample(np.asarray(frames[start:start + length]), seeds, win)


def _seed_mask(sample: Sample, Wn):
    return np.arange(Wn)[:, None] >= sample.seeds.frame[None, :]


def accumulate_gradients(params, micro_batches, model_cfg: ModelConfig, loss_cfg: LossConfig):
    """Gradient of the batch loss summed over micro-batches in sample order."""
    samples = [s for mb in micro_batches for s in mb]
    if not samples:
        raise ValidationError("empty batch")
    norm = sum(count_valid(_seed_mask(s, s.frames.shape[0])) for s in samples)
    if norm == 0:
        raise ValidationError("no valid point-frame in batch")
    supervise_apu = model_cfg.uses_apu and model_cfg.per_layer_supervision
    total = LossValue(0.0, 0.0, 0.0, 0.0)
    grads = None
    for mb in micro_batches:
        for s in mb:
            out = forward_window(s.frames, s.seeds, params, model_cfg, keep_cache=True)
            lv, lg = compute_loss(out, s.gt, loss_cfg, supervise_apu, norm)
            g = backward_window(out, lg.positions, lg.apu_positions, lg.vis_logits, params, model_cfg)
            total = total + lv
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    return total, grads


def train_step(params, batch, opt: OptimState, model_cfg: ModelConfig, loss_cfg: LossConfig,
               accumulate: int = 1) -> LossValue:
    """Forward, backward and one optimiser update; ``batch`` is a list of samples."""
    if not batch:
        raise ValidationError("empty batch")
    if accumulate < 1:
        raise ConfigError("accumulate must be >= 1")
    chunks = [list(c) for c in np.array_split(np.arange(len(batch)), min(accumulate, len(batch)))]
    micro = [[batch[i] for i in c] for c in chunks]
    loss, grads = accumulate_gradients(params, micro, model_cfg, loss_cfg)
    adamw_update(params, grads, opt)
    return loss


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    clip_norm: float = 1.0
    warmup: int = 20
    batch_size: int = 1
    accumulate: int = 1
    seed: int = 0
    max_points: int = 16
    lambda_pos: float = 1.0
    lambda_apu: float = 1.0
    lambda_vis: float = 1.0
    log_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.accumulate < 1:
            raise ConfigError("steps, batch_size and accumulate out of range")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_pos, self.lambda_apu, self.lambda_vis)

    def save(self, path):
        write_keyvalue(path, self)

    @classmethod
    def load(cls, path):
        return coerce_fields(cls, read_keyvalue(path))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TrainResult:
    params: dict
    opt: OptimState
    history: list  # rows of (step, total, pos, apu, vis)


def train(videos, model_cfg: ModelConfig, train_cfg: TrainConfig, params=None,
          log=None) -> TrainResult:
    """Train on ``videos`` (a list of ``(frames, GroundTruth)``) for ``train_cfg.steps``."""
    if not videos:
        raise ValidationError("no training videos")
    from .model import init_params

    rng = np.random.default_rng(train_cfg.seed)
    params = params if params is not None else init_params(model_cfg, seed=train_cfg.seed)
    opt = OptimState.create(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                            ema_decay=train_cfg.ema_decay, clip_norm=train_cfg.clip_norm,
                            warmup=train_cfg.warmup)
    wlen = model_cfg.window
    windows = [(v, s) for v, (frames, _) in enumerate(videos)
               for s in range(0, max(1, frames.shape[0] - wlen + 1))]
    history = []
    for step in range(1, train_cfg.steps + 1):
        batch = []
        while len(batch) < train_cfg.batch_size:
            v, s = windows[int(rng.integers(len(windows)))]
            frames, gt = videos[v]
            sample = sample_from_video(frames, gt, s, wlen, train_cfg.max_points, rng)
            if sample.seeds.n_points:
                batch.append(sample)
        loss = train_step(params, batch, opt, model_cfg, train_cfg.loss, train_cfg.accumulate)
        history.append((step, loss.total, loss.pos, loss.apu, loss.vis))
        if log and train_cfg.log_every and step % train_cfg.log_every == 0:
            log(f"step {step}: loss {loss.total:.4f} (pos {loss.pos:.4f} apu {loss.apu:.4f} "
                f"vis {loss.vis:.4f})")
    return TrainResult(params, opt, history)


def write_loss_csv(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "total", "pos", "apu", "vis"])
        for row in history:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
