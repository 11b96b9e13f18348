"""Evaluation drivers, ablation harness, compute profile, overlays and
attention-weight histograms."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .errors import ValidationError
from .metrics import MetricsReport, aggregate, compute_metrics
from .numerics import count_macs
from .synthdata import generate_video
from .tracker import QueryMode, TrackSet, aligned_ground_truth, run_query_mode, track_video
from .training import TrainConfig, train

# --------------------------------------------------------------------------
# evaluation


def evaluate_video(frames, gt, params, cfg: M.ModelConfig, mode="first"):
    """Track ``gt``'s query points through ``frames``; returns ``(TrackSet, MetricsReport)``."""
    mode = QueryMode.parse(mode) if isinstance(mode, str) else mode
    tracks = run_query_mode(mode, frames, gt,
                            lambda f, s: track_video(f, s, params, cfg))
    report = compute_metrics(tracks, aligned_ground_truth(gt, tracks),
                             eval_resolution=frames.shape[2:])
    return tracks, report


def evaluate_videos(videos, params, cfg, mode="first") -> list[MetricsReport]:
    return [evaluate_video(f, g, params, cfg, mode)[1] for f, g in videos]


# --------------------------------------------------------------------------
# ablation harness

TOGGLES = ("mode", "key_aware", "disentangle", "per_layer_supervision", "self_attn",
           "temporal_attn")

# decoder-design ladder: each row adds one component
LADDER = {
    "row1_plain": dict(key_aware=False, mode="no_position_update", disentangle=False,
                       per_layer_supervision=False),
    "row2_key_aware": dict(key_aware=True, mode="no_position_update", disentangle=False,
                           per_layer_supervision=False),
    "row3_apu": dict(key_aware=True, mode="apu", disentangle=False, per_layer_supervision=False),
    "row4_disentangle": dict(key_aware=True, mode="apu", disentangle=True,
                             per_layer_supervision=False),
    "row5_supervised": dict(key_aware=True, mode="apu", disentangle=True,
                            per_layer_supervision=True),
}

# component ladder on the query side; the cost-volume row is the older design
COMPONENTS = {
    "base": dict(self_attn=False, temporal_attn=False, mode="no_position_update"),
    "self_attn": dict(self_attn=True, temporal_attn=False, mode="no_position_update"),
    "temporal_attn": dict(self_attn=True, temporal_attn=True, mode="no_position_update"),
    "cost_volume": dict(self_attn=True, temporal_attn=True, mode="cost_volume_baseline"),
    "apu": dict(self_attn=True, temporal_attn=True, mode="apu"),
}


@dataclass
class AblationData:
    train: list
    val_in: list
    val_shift: list

    @classmethod
    def synthetic(cls, n_train=24, n_val=8, seed=0, val_frames=None, **spec):
        """Disjoint seeds per split; ``val_frames`` lets validation clips span
        more than one window."""
        from .synthdata import video_specs

        def make(n, s, style, **extra):
            return [generate_video(sp) for sp in video_specs(n, s, style, **{**spec, **extra})]
        val = {} if val_frames is None else {"n_frames": val_frames}
        return cls(make(n_train, seed, "in_domain"),
                   make(n_val, seed + 10_000, "in_domain", **val),
                   make(n_val, seed + 20_000, "shifted", **val))


def ablation_harness(grid: dict, data: AblationData, base_cfg: M.ModelConfig,
                     train_cfg: TrainConfig, query_mode="first", log=None) -> list[dict]:
    """Train every setting of ``grid`` (name -> config overrides) with the same
    seed and budget and score it on both validation splits; one row per
    setting."""
    rows = []
    for name, overrides in grid.items():
        cfg = base_cfg.replace(**overrides)
        t0 = time.perf_counter()
        res = train(data.train, cfg, train_cfg, log=log)
        row = {"setting": name, "seed": train_cfg.seed, "steps": train_cfg.steps}
        row.update({k: getattr(cfg, k) for k in TOGGLES})
        row["train_seconds"] = time.perf_counter() - t0
        row["final_loss"] = res.history[-1][1] if res.history else float("nan")
        for split, videos in (("in", data.val_in), ("shift", data.val_shift)):
            agg = aggregate(evaluate_videos(videos, res.params, cfg, query_mode))
            row.update({f"{split}_{k}": agg[k] for k in ("AJ", "delta_avg", "OA")})
        rows.append(row)
        if log:
            log(f"{name}: AJ in-domain {row['in_AJ']:.4f}, shifted {row['shift_AJ']:.4f}")
    return rows


def write_rows_csv(path, rows) -> None:
    if not rows:
        raise ValidationError("no rows to write")
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def lookup(rows, setting, key="in_AJ") -> float:
    for r in rows:
        if r["setting"] == setting:
            return float(r[key])
    raise KeyError(setting)


# --------------------------------------------------------------------------
# compute profile


def analytic_macs(cfg: M.ModelConfig, n_points: int, n_frames: int | None = None) -> int:
    """Closed-form multiply-accumulate count of one ``forward_window`` call
    with every point starting fresh; mirrors the instrumented counters."""
    B = cfg.window if n_frames is None else n_frames
    H, W = cfg.image_size
    d, h, L, K = cfg.d, cfg.n_heads, cfg.n_levels, cfg.n_points
    dh = d // h
    hLK = h * L * K
    chans = (3, *M.BACKBONE_CHANNELS, d)
    total = 0
    for i in range(3):
        s = 2 ** (i + 1)
        total += B * (H // s) * (W // s) * chans[i + 1] * chans[i] * 9
    sizes = [(H // s, W // s) for s in cfg.strides]
    proj_in = (M.BACKBONE_CHANNELS[1], d)
    total += sum(B * hh * ww * c * d for (hh, ww), c in zip(sizes, proj_in))
    n_cells = sum(hh * ww for hh, ww in sizes)

    def deform(nq, key_aware):
        t = B * n_cells * d * d          # value projection
        t += nq * d * 2 * hLK            # offsets
        t += nq * hLK * 4 * dh           # bilinear gather
        t += nq * (d * d + hLK * dh) if key_aware else nq * d * hLK
        t += nq * hLK * dh               # weighted sum
        t += nq * d * d                  # output projection
        return t

    ffn = 2 * cfg.ffn_mult * d * d
    total += cfg.n_encoder * (deform(B * n_cells, False) + B * n_cells * ffn)
    N = n_points
    if N == 0:
        return total
    Q = B * N
    total += L * 4 * N * d + N * (L * d * d + d * d)   # query init
    if cfg.mode == "cost_volume_baseline":
        total += sum(B * N * hh * ww * d for hh, ww in sizes)
    n_grid = (2 * cfg.grid_radius + 1) ** 2
    layer = 0
    if cfg.self_attn:
        layer += 4 * Q * d * d + 2 * B * N * d * N
    if cfg.temporal_attn:
        layer += 4 * Q * d * d + 2 * N * B * d * B
    if cfg.mode == "cost_volume_baseline":
        layer += L * Q * n_grid * 4 + Q * ((d + L * n_grid) * d + d * d)
    layer += deform(Q, cfg.key_aware)
    if cfg.uses_apu:
        layer += 2 * Q * h * L * K
        if cfg.disentangle:
            layer += Q * h * 2 * (L * K) ** 2
    layer += Q * ffn + Q * (d * d + 2 * d)
    total += cfg.n_decoder * layer
    total += Q * (d * d + d)   # visibility head
    return total


def cost_volume_extra_per_point(cfg: M.ModelConfig) -> int:
    """Per-point MACs the cost-volume design adds over the attention update:
    the dense dot product against every cell plus the grid sampling and
    aggregation MLP, minus the (cheaper) position update it replaces."""
    apu = cfg.replace(mode="apu")
    return analytic_macs(cfg.replace(mode="cost_volume_baseline"), 1) - analytic_macs(apu, 1) - (
        analytic_macs(cfg.replace(mode="cost_volume_baseline"), 0) - analytic_macs(apu, 0))


@dataclass
class ProfileRow:
    n_points: int
    mode: str
    macs: int
    macs_per_frame: float
    measured_macs: int | None
    seconds: float | None


@dataclass
class OpCountReport:
    rows: list = field(default_factory=list)

    def get(self, n, mode) -> ProfileRow:
        for r in self.rows:
            if r.n_points == n and r.mode == mode:
                return r
        raise KeyError((n, mode))

    def ratio(self, n, what="macs") -> float:
        a = getattr(self.get(n, "cost_volume_baseline"), what)
        b = getattr(self.get(n, "apu"), what)
        return float(a) / float(b)

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}


def _random_seeds(n, window, rng):
    return M.QuerySeeds.starts(np.zeros(n, np.int64), rng.uniform(0.05, 0.95, (n, 2)))


def profile_modes(cfg: M.ModelConfig, n_list, measure=True, repeats=1, seed=0,
                  modes=("apu", "cost_volume_baseline")) -> OpCountReport:
    """Analytic MAC counts for both designs and, with ``measure``, the
    instrumented count and best-of-``repeats`` wall time of one window."""
    rep = OpCountReport()
    rng = np.random.default_rng(seed)
    frames = rng.random((cfg.window, 3, *cfg.image_size)).astype(np.float32)
    for n in n_list:
        seeds = _random_seeds(int(n), cfg.window, rng)
        for mode in modes:
            c = cfg.replace(mode=mode)
            macs = analytic_macs(c, int(n))
            measured = secs = None
            if measure:
                P = M.init_params(c, seed=seed)
                best = np.inf
                for _ in range(repeats):
                    with count_macs() as counter:
                        t0 = time.perf_counter()
                        M.forward_window(frames, seeds, P, c)
                        best = min(best, time.perf_counter() - t0)
                    measured = counter["count"]
                secs = best
            rep.rows.append(ProfileRow(int(n), mode, macs, macs / cfg.window, measured, secs))
    return rep


# --------------------------------------------------------------------------
# overlays

PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
                    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255]], np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM from (H, W, 3) uint8."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValidationError(f"{path} is not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h * 3], np.uint8).reshape(h, w, 3)


def _plot(img, x, y, colour):
    h, w = img.shape[:2]
    ok = (x >= 0) & (x < w) & (y >= 0) & (y < h)
    img[y[ok], x[ok]] = colour


def _line(img, p, q, colour):
    n = int(max(abs(q[0] - p[0]), abs(q[1] - p[1]))) + 1
    xs = np.rint(np.linspace(p[0], q[0], n + 1)).astype(int)
    ys = np.rint(np.linspace(p[1], q[1], n + 1)).astype(int)
    _plot(img, xs, ys, colour)


def _marker(img, cx, cy, colour, hollow, radius=2):
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    ring = np.maximum(abs(dx), abs(dy)) == radius
    keep = ring if hollow else np.ones_like(ring)
    _plot(img, cx + dx[keep], cy + dy[keep], colour)


@dataclass
class MarkerRecord:
    frame: int
    point: int
    x: int
    y: int
    hollow: bool


def export_overlay(frames, tracks: TrackSet, out_dir, scale: int = 4, trail: int = 8):
    """Write ``frame_%05d.ppm`` per frame with trajectory polylines and markers.

    Images are upscaled by ``scale``; occluded points get hollow markers.
    Returns the list of :class:`MarkerRecord`.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] != tracks.n_frames:
        raise ValidationError(f"{frames.shape[0]} frames for a track set of {tracks.n_frames}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create {out}: {exc}") from exc
    T, _, H, W = frames.shape
    px = tracks.xy * np.array([W * scale, H * scale])
    cell = np.floor(np.minimum(px, np.array([W * scale - 1, H * scale - 1]))).astype(int)
    visible = tracks.visible
    records = []
    for t in range(T):
        img = (np.clip(frames[t], 0, 1).transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8)
        img = np.repeat(np.repeat(img, scale, 0), scale, 1)
        for i in range(tracks.n_points):
            e = tracks.emergence[i]
            if t < e:
                continue
            colour = PALETTE[i % len(PALETTE)]
            for s in range(max(e, t - trail), t):
                _line(img, cell[i, s], cell[i, s + 1], colour)
            hollow = not visible[i, t]
            _marker(img, cell[i, t, 0], cell[i, t, 1], colour, hollow)
            records.append(MarkerRecord(t, i, int(cell[i, t, 0]), int(cell[i, t, 1]), hollow))
        try:
            write_ppm(out / f"frame_{t:05d}.ppm", img)
        except OSError as exc:
            raise ValidationError(f"cannot write to {out}: {exc}") from exc
    return records


# --------------------------------------------------------------------------
# attention-weight distributions

N_BINS = 64


@dataclass
class AttentionHistograms:
    edges: np.ndarray
    content: np.ndarray
    position: np.ndarray
    per_layer: list

    @property
    def tv_distance(self) -> float:
        return 0.5 * float(np.abs(self.content - self.position).sum())

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "bin_lo", "bin_hi", "content", "position"])
            for layer, (c, p) in [("all", (self.content, self.position))] + list(
                    enumerate(self.per_layer)):
                for b in range(len(c)):
                    w.writerow([layer, repr(float(self.edges[b])), repr(float(self.edges[b + 1])),
                                repr(float(c[b])), repr(float(p[b]))])


def _hist(values, edges):
    counts, _ = np.histogram(values, bins=edges)
    total = counts.sum()
    return counts / total if total else counts.astype(float)


def dump_attention_distributions(params, cfg: M.ModelConfig, batch, bins: int = N_BINS):
    """Histograms of the content-path weights ``softmax(A / sqrt(d_h))`` and
    the position-path weights ``softmax(Disentangler(A / sqrt(d_h)))`` over
    every valid query, head and layer.  ``batch`` is a list of
    ``(frames, QuerySeeds)`` windows."""
    if not cfg.uses_apu:
        raise ValidationError("attention distributions need the attention position update")
    edges = np.linspace(0.0, 1.0, bins + 1)
    content = [[] for _ in range(cfg.n_decoder)]
    position = [[] for _ in range(cfg.n_decoder)]
    for frames, seeds in batch:
        out = M.forward_window(frames, seeds, params, cfg)
        for j, rec in enumerate(out.records):
            m = out.emerged
            content[j].append(rec.content_weights[m].ravel())
            position[j].append(rec.position_weights[m].ravel())
    if not any(content):
        raise ValidationError("no queries to measure")
    per_layer = [(_hist(np.concatenate(c), edges), _hist(np.concatenate(p), edges))
                 for c, p in zip(content, position)]
    return AttentionHistograms(edges, _hist(np.concatenate(sum(content, [])), edges),
                               _hist(np.concatenate(sum(position, [])), edges), per_layer)
