"""Sliding-window inference and the evaluation query protocols.

A video is cut into consecutive, non-overlapping windows of ``cfg.window``
frames.  The last window is zero-padded up to the full length and its extra
outputs dropped.  Each window after the first starts every active point from
the previous window's last-frame prediction (content feature and position).
Positions may leave the unit square internally; they are clamped only when
written into a :class:`TrackSet`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ValidationError
from .model import LayerOutputs, ModelConfig, QuerySeeds, forward_window

STRIDE = 5


@dataclass
class TrackSet:
    emergence: np.ndarray  # (N,) int
    xy: np.ndarray         # (N, T, 2) normalized, clamped to [0, 1]
    vis: np.ndarray        # (N, T) visibility probability
    size: tuple = (64, 64)
    fps: float = 10.0
    point_index: np.ndarray | None = field(default=None, repr=False)
    query_frame: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.emergence = np.asarray(self.emergence, dtype=np.int64).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=np.float64)
        self.vis = np.asarray(self.vis, dtype=np.float64)
        n = len(self.emergence)
        if self.xy.shape[:1] != (n,) or self.vis.shape != self.xy.shape[:2]:
            raise ValidationError("track arrays disagree on point or frame count")
        if self.point_index is None:
            self.point_index = np.arange(n)
        if self.query_frame is None:
            self.query_frame = self.emergence.copy()

    @property
    def n_points(self) -> int:
        return len(self.emergence)

    @property
    def n_frames(self) -> int:
        return self.xy.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.n_frames)[None, :] >= self.emergence[:, None]

    @property
    def visible(self) -> np.ndarray:
        return self.vis >= 0.5

    def to_json(self) -> dict:
        return {"fps": self.fps, "size": [int(s) for s in self.size],
                "points": [{"emergence": int(self.emergence[i]), "xy": self.xy[i].tolist(),
                            "vis": self.vis[i].tolist()} for i in range(self.n_points)]}

    @classmethod
    def from_json(cls, obj: dict) -> "TrackSet":
        try:
            pts = obj["points"]
            e = [p["emergence"] for p in pts]
            xy = np.array([p["xy"] for p in pts], dtype=np.float64).reshape(len(pts), -1, 2)
            vis = np.array([p["vis"] for p in pts], dtype=np.float64).reshape(len(pts), -1)
            return cls(e, xy, vis, tuple(obj.get("size", (64, 64))), float(obj.get("fps", 10.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed track set: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "TrackSet":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"track file not found: {path}")
        return cls.from_json(json.loads(path.read_text()))


WindowFn = Callable[[np.ndarray, QuerySeeds], LayerOutputs]


def window_handoff(prev: LayerOutputs) -> QuerySeeds:
    """Seeds for the next window from the last frame of ``prev`` (copies)."""
    return QuerySeeds.handoff(prev.features[-1], prev.final_positions[-1])


def model_window_fn(params, cfg: ModelConfig) -> WindowFn:
    return lambda frames, seeds: forward_window(frames, seeds, params, cfg)


def track_video(frames, starts, params=None, cfg: ModelConfig | None = None, *,
                window_fn: WindowFn | None = None, window: int | None = None) -> TrackSet:
    """Track points through a whole video.

    ``starts`` is ``(emergence frames (N,), positions (N, 2))``.  Either
    ``params``/``cfg`` or a custom ``window_fn`` (plus ``window``) drive the
    per-window forward.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ValidationError("video must have at least one frame")
    if window_fn is None:
        if params is None or cfg is None:
            raise ValidationError("need params and cfg, or a window function")
        window_fn = model_window_fn(params, cfg)
    wlen = window or cfg.window
    T = frames.shape[0]
    e = np.asarray(starts[0], dtype=np.int64).reshape(-1)
    start_xy = np.asarray(starts[1], dtype=np.float64).reshape(-1, 2)
    N = len(e)
    if len(start_xy) != N:
        raise ValidationError("emergence frames and start positions differ in length")
    if N and (e.min() < 0 or e.max() >= T):
        raise ValidationError(f"emergence frames must lie in [0, {T})")

    xy_out = np.broadcast_to(start_xy[:, None], (N, T, 2)).copy()
    vis_out = np.zeros((N, T))
    active = np.zeros(N, bool)
    feat = None
    pos = start_xy.copy()
    for start in range(0, T, wlen):
        stop = min(start + wlen, T)
        ids = np.flatnonzero(e < stop)
        if not len(ids):
            continue
        chunk = frames[start:stop]
        if stop - start < wlen:
            pad = np.zeros((wlen - (stop - start),) + frames.shape[1:], frames.dtype)
            chunk = np.concatenate([chunk, pad])
        fresh = ~active[ids]
        seeds = QuerySeeds(frame=np.where(fresh, e[ids] - start, 0),
                           xy=np.where(fresh[:, None], start_xy[ids], pos[ids]),
                           fresh=fresh,
                           feat=None if feat is None else feat[ids])
        out = window_fn(chunk, seeds)
        n = stop - start
        block = np.asarray(out.final_positions[:n], dtype=np.float64).transpose(1, 0, 2)
        xy_out[ids, start:stop] = block
        vis_out[ids, start:stop] = np.asarray(out.visibility[:n], dtype=np.float64).T
        nxt = window_handoff(out)
        if feat is None:
            feat = np.zeros((N, nxt.feat.shape[1]), nxt.feat.dtype)
        feat[ids] = nxt.feat
        pos[ids] = nxt.xy
        active[ids] = True

    before = np.arange(T)[None, :] < e[:, None]
    vis_out[before] = 0.0
    xy_out[before] = np.broadcast_to(start_xy[:, None], (N, T, 2))[before]
    return TrackSet(e, np.clip(xy_out, 0.0, 1.0), vis_out, size=frames.shape[2:])


# --------------------------------------------------------------------------
# evaluation protocols


@dataclass(frozen=True)
class QueryMode:
    kind: str = "first"
    stride: int = STRIDE

    def __post_init__(self):
        if self.kind not in ("first", "strided"):
            raise ValidationError(f"query mode must be 'first' or 'strided', got {self.kind!r}")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")

    @classmethod
    def parse(cls, name: str) -> "QueryMode":
        return cls(name)


TrackFn = Callable[[np.ndarray, tuple], TrackSet]


def run_query_mode(mode: QueryMode, frames, gt, track: TrackFn) -> TrackSet:
    """Build queries from ground truth and track them under ``mode``.

    ``track(frames, (emergence, xy))`` returns a :class:`TrackSet`.  The result
    has one row per query; ``point_index`` maps rows back to ground-truth
    points and ``emergence`` marks the first evaluated frame.  Points never
    visible at a query frame produce no row.
    """
    if isinstance(mode, str):
        mode = QueryMode.parse(mode)
    frames = np.asarray(frames)
    T = frames.shape[0]
    if gt.n_points == 0:
        raise ValidationError("ground truth has no query points")
    size = frames.shape[2:]

    if mode.kind == "first":
        q = gt.query_frames
        idx = np.flatnonzero(q >= 0)
        if not len(idx):
            return _empty(T, size)
        res = track(frames, (q[idx], gt.xy[idx, q[idx]]))
        return TrackSet(res.emergence, res.xy, res.vis, size, point_index=idx, query_frame=q[idx])

    rows_xy, rows_vis, rows_pt, rows_q = [], [], [], []
    for t in range(0, T, mode.stride):
        idx = np.flatnonzero(gt.vis[:, t])
        if not len(idx):
            continue
        xy0 = gt.xy[idx, t]
        zeros = np.zeros(len(idx), np.int64)
        fwd = track(frames[t:], (zeros, xy0))
        xy = np.empty((len(idx), T, 2))
        vis = np.empty((len(idx), T))
        xy[:, t:], vis[:, t:] = fwd.xy, fwd.vis
        if t > 0:
            bwd = track(frames[t::-1].copy(), (zeros, xy0))
            xy[:, :t] = bwd.xy[:, :0:-1]
            vis[:, :t] = bwd.vis[:, :0:-1]
        rows_xy.append(xy)
        rows_vis.append(vis)
        rows_pt.append(idx)
        rows_q.append(np.full(len(idx), t))
    if not rows_pt:
        return _empty(T, size)
    n = sum(len(r) for r in rows_pt)
    return TrackSet(np.zeros(n, np.int64), np.concatenate(rows_xy), np.concatenate(rows_vis), size,
                    point_index=np.concatenate(rows_pt), query_frame=np.concatenate(rows_q))


def _empty(T, size):
    return TrackSet(np.zeros(0, np.int64), np.zeros((0, T, 2)), np.zeros((0, T)), size)


def aligned_ground_truth(gt, tracks: TrackSet):
    """Ground truth rows matching ``tracks.point_index``."""
    return gt.subset(tracks.point_index)
