"""Deterministic synthetic videos: textured sprites over a drifting background.

Geometry is in pixel units with pixel ``(i, j)`` centred at ``(j + 0.5, i + 0.5)``.
Sprites only translate, so a point attached to a sprite moves exactly with
the sprite's centre; ground-truth tracks are analytic, never read back from
pixels.  Rendering uses the painter's algorithm at pixel centres and keeps
the per-pixel owner, from which visibility is derived:

* a point is out of frame when its pixel leaves the image;
* otherwise it is occluded when its pixel centre belongs to a sprite strictly
  shallower than the point's owner (the background is infinitely deep).

Ground truth is reported in normalized coordinates, ``x / W`` and ``y / H``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .formats import load_frames, save_frames

BACKGROUND = -1
TEXTURE_TILE = 16
STYLES = ("in_domain", "shifted")


@dataclass(frozen=True)
class SpriteSpec:
    shape: str                  # "circle" or "rect"
    center: tuple               # (x, y) at t = 0, pixels
    size: tuple                 # (radius,) or (half_w, half_h)
    velocity: tuple = (0.0, 0.0)
    wobble_amp: tuple = (0.0, 0.0)
    wobble_freq: float = 0.0
    wobble_phase: float = 0.0
    depth: float = 1.0
    texture_seed: int = 0
    texture_period: float = 4.0

    def __post_init__(self):
        if self.shape not in ("circle", "rect"):
            raise ValidationError(f"unknown sprite shape {self.shape!r}")
        if min(self.size) <= 0 or self.texture_period <= 0:
            raise ValidationError("sprite size and texture period must be positive")

    def center_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        return (np.asarray(self.center) + np.asarray(self.velocity) * t
                + np.asarray(self.wobble_amp) * np.sin(self.wobble_freq * t + self.wobble_phase))

    def covers(self, local: np.ndarray) -> np.ndarray:
        """Membership of sprite-local offsets (..., 2)."""
        if self.shape == "circle":
            return (local ** 2).sum(-1) <= self.size[0] ** 2
        return (np.abs(local[..., 0]) <= self.size[0]) & (np.abs(local[..., 1]) <= self.size[1])


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    n_frames: int = 8
    n_sprites: int = 3
    n_points: int = 16
    max_speed: float = 1.5
    wobble: float = 1.5
    background_drift: tuple = (0.3, -0.2)
    background_points: bool = True
    style: str = "in_domain"
    sprites: tuple | None = None  # explicit sprites override the random draw

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValidationError("a scene needs at least two frames")
        if self.height < 2 or self.width < 2:
            raise ValidationError("image too small")
        if self.style not in STYLES:
            raise ValidationError(f"style must be one of {STYLES}")
        if self.n_points < 0 or self.n_sprites < 0:
            raise ValidationError("counts must be non-negative")
        if self.sprites is not None:
            depths = [s.depth for s in self.sprites]
            if len(set(depths)) != len(depths):
                raise ValidationError("sprite depths must be unique")


@dataclass
class GroundTruth:
    xy: np.ndarray   # (N, T, 2) normalized
    vis: np.ndarray  # (N, T) bool
    owner: np.ndarray = field(default=None, repr=False)  # (N,) sprite index or BACKGROUND

    @property
    def n_points(self) -> int:
        return self.xy.shape[0]

    @property
    def n_frames(self) -> int:
        return self.xy.shape[1]

    @property
    def query_frames(self) -> np.ndarray:
        """First visible frame per point (-1 when never visible)."""
        first = np.argmax(self.vis, axis=1)
        return np.where(self.vis.any(axis=1), first, -1)

    def window(self, start: int, stop: int) -> "GroundTruth":
        return GroundTruth(self.xy[:, start:stop], self.vis[:, start:stop], self.owner)

    def subset(self, idx) -> "GroundTruth":
        owner = None if self.owner is None else self.owner[idx]
        return GroundTruth(self.xy[idx], self.vis[idx], owner)


@dataclass
class Scene:
    spec: SceneSpec
    sprites: tuple
    palettes: dict      # texture seed -> (TEXTURE_TILE, TEXTURE_TILE, 3)
    bg_period: float
    bg_seed: int

    def background_offset(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        return np.asarray(self.spec.background_drift) * t


# --------------------------------------------------------------------------
# scene construction


def _style_params(style):
    if style == "in_domain":
        return dict(period=(3.0, 6.0), speed_scale=1.0, wobble_scale=1.0, hue=0.0)
    return dict(period=(2.0, 3.0), speed_scale=1.6, wobble_scale=1.8, hue=0.5)


def _palette(seed: int, hue: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    colours = rng.uniform(0.05, 0.95, size=(TEXTURE_TILE, TEXTURE_TILE, 3))
    if hue:
        colours = np.roll(colours, 1, axis=-1) * (1 - 0.3 * hue) + 0.3 * hue * colours[..., ::-1]
    return colours


def build_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    style = _style_params(spec.style)
    if spec.sprites is not None:
        sprites = tuple(spec.sprites)
    else:
        depths = rng.permutation(spec.n_sprites) + 1.0
        sprites = []
        for k in range(spec.n_sprites):
            shape = "circle" if rng.random() < 0.5 else "rect"
            size = (rng.uniform(5, 11),) if shape == "circle" else tuple(rng.uniform(4, 10, size=2))
            speed = spec.max_speed * style["speed_scale"]
            sprites.append(SpriteSpec(
                shape=shape,
                center=tuple(rng.uniform([8, 8], [spec.width - 8, spec.height - 8])),
                size=size,
                velocity=tuple(rng.uniform(-speed, speed, size=2)),
                wobble_amp=tuple(rng.uniform(0, spec.wobble * style["wobble_scale"], size=2)),
                wobble_freq=float(rng.uniform(0.3, 1.2)),
                wobble_phase=float(rng.uniform(0, 2 * np.pi)),
                depth=float(depths[k]),
                texture_seed=int(rng.integers(1 << 30)),
                texture_period=float(rng.uniform(*style["period"])),
            ))
        sprites = tuple(sprites)
    bg_seed = int(rng.integers(1 << 30))
    bg_period = float(rng.uniform(*style["period"]))
    palettes = {s.texture_seed: _palette(s.texture_seed, style["hue"]) for s in sprites}
    palettes[bg_seed] = _palette(bg_seed, style["hue"])
    return Scene(spec, sprites, palettes, bg_period, bg_seed)


def _texture(coords, period, palette):
    cells = np.floor(coords / period).astype(np.int64) % TEXTURE_TILE
    return palette[cells[..., 1], cells[..., 0]]


def pixel_centres(height: int, width: int, supersample: int = 1) -> np.ndarray:
    """(H*s, W*s, 2) sample positions in pixel units."""
    n = supersample
    ys = (np.arange(height * n) + 0.5) / n
    xs = (np.arange(width * n) + 0.5) / n
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy], -1)


def rasterize(scene: Scene, t: int, supersample: int = 1):
    """Render frame ``t``; returns ``(rgb (h, w, 3), owner (h, w))``."""
    spec = scene.spec
    pts = pixel_centres(spec.height, spec.width, supersample)
    rgb = _texture(pts - scene.background_offset(t), scene.bg_period, scene.palettes[scene.bg_seed])
    owner = np.full(pts.shape[:2], BACKGROUND, dtype=np.int64)
    order = sorted(range(len(scene.sprites)), key=lambda k: -scene.sprites[k].depth)
    for k in order:  # deepest first
        s = scene.sprites[k]
        local = pts - s.center_at(t)
        inside = s.covers(local)
        rgb[inside] = _texture(local[inside], s.texture_period, scene.palettes[s.texture_seed])
        owner[inside] = k
    return rgb, owner


def _depth(scene, owner):
    d = np.array([s.depth for s in scene.sprites] + [np.inf])
    return d[np.where(owner == BACKGROUND, len(scene.sprites), owner)]


def track_positions(scene: Scene, owner: np.ndarray, local: np.ndarray, n_frames: int):
    """Pixel positions (N, T, 2) of points with given owners and local offsets."""
    t = np.arange(n_frames)
    out = np.empty((len(owner), n_frames, 2))
    for i, (o, u) in enumerate(zip(owner, local)):
        base = scene.background_offset(t) if o == BACKGROUND else scene.sprites[o].center_at(t)
        out[i] = base + u
    return out


def visibility_from_owner_maps(scene: Scene, owner_maps: np.ndarray, owner: np.ndarray,
                               pos_px: np.ndarray) -> np.ndarray:
    """Visibility of points (N, T) from per-frame owner maps (T, H, W)."""
    T, H, W = owner_maps.shape
    j = np.floor(pos_px[..., 0]).astype(np.int64)
    i = np.floor(pos_px[..., 1]).astype(np.int64)
    inside = (i >= 0) & (i < H) & (j >= 0) & (j < W)
    tt = np.broadcast_to(np.arange(T), i.shape)
    pix_owner = owner_maps[tt, np.clip(i, 0, H - 1), np.clip(j, 0, W - 1)]
    own_depth = _depth(scene, np.broadcast_to(owner[:, None], i.shape))
    return inside & (_depth(scene, pix_owner) >= own_depth)


def _sample_points(scene: Scene, owner_maps, rng):
    spec = scene.spec
    T, H, W = owner_maps.shape
    owners, locals_ = [], []
    allowed = np.ones(len(scene.sprites) + 1, bool)
    allowed[-1] = spec.background_points
    attempts = 0
    while len(owners) < spec.n_points:
        attempts += 1
        if attempts > 10000 * max(1, spec.n_points):
            raise ValidationError("could not place points on any allowed surface")
        t0 = int(rng.integers(T))
        i, j = int(rng.integers(H)), int(rng.integers(W))
        o = int(owner_maps[t0, i, j])
        if not allowed[o]:
            continue
        pos = np.array([j + rng.uniform(0.05, 0.95), i + rng.uniform(0.05, 0.95)])
        base = scene.background_offset(t0) if o == BACKGROUND else scene.sprites[o].center_at(t0)
        owners.append(o)
        locals_.append(pos - base)
    return np.array(owners, dtype=np.int64), np.array(locals_).reshape(-1, 2)


def generate_video(spec: SceneSpec):
    """Render a scene; returns ``(frames (T, 3, H, W) float32, GroundTruth)``."""
    scene = build_scene(spec)
    if not scene.sprites and not spec.background_points and spec.n_points:
        raise ValidationError("no sprites and no background points: nothing to track")
    rgbs, owners = zip(*(rasterize(scene, t) for t in range(spec.n_frames)))
    frames = np.stack(rgbs).transpose(0, 3, 1, 2).astype(np.float32)
    owner_maps = np.stack(owners)
    rng = np.random.default_rng([spec.seed, 1])
    owner, local = _sample_points(scene, owner_maps, rng)
    pos = track_positions(scene, owner, local, spec.n_frames)
    vis = visibility_from_owner_maps(scene, owner_maps, owner, pos)
    xy = pos / np.array([spec.width, spec.height])
    return frames, GroundTruth(xy, vis, owner)


# --------------------------------------------------------------------------
# dataset on disk


def gt_to_json(gt: GroundTruth, size, fps: float = 10.0) -> dict:
    q = gt.query_frames
    return {"fps": fps, "size": [int(size[0]), int(size[1])],
            "points": [{"emergence": int(q[i]), "xy": gt.xy[i].tolist(),
                        "vis": [bool(v) for v in gt.vis[i]]} for i in range(gt.n_points)]}


def gt_from_json(obj: dict) -> GroundTruth:
    pts = obj.get("points")
    if pts is None:
        raise ValidationError("ground truth JSON lacks 'points'")
    if not pts:
        return GroundTruth(np.zeros((0, 0, 2)), np.zeros((0, 0), bool))
    xy = np.array([p["xy"] for p in pts], dtype=np.float64)
    vis = np.array([p["vis"] for p in pts], dtype=bool)
    return GroundTruth(xy, vis)


def write_video(directory, frames: np.ndarray, gt: GroundTruth) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_frames(directory / "frames.bin", frames)
    (directory / "gt.json").write_text(json.dumps(gt_to_json(gt, frames.shape[2:])))


def read_video(directory):
    directory = Path(directory)
    for name in ("frames.bin", "gt.json"):
        if not (directory / name).is_file():
            raise ValidationError(f"missing {directory / name}")
    try:
        gt = gt_from_json(json.loads((directory / "gt.json").read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"malformed {directory / 'gt.json'}: {exc}") from exc
    return load_frames(directory / "frames.bin"), gt


def video_specs(n_videos: int, seed: int, style: str = "in_domain", **overrides):
    """``n_videos`` scene specs whose seeds derive from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n_videos)
    return [SceneSpec(seed=int(s), style=style, **overrides) for s in seeds]


def write_dataset(directory, specs) -> list:
    directory = Path(directory)
    names = []
    for k, spec in enumerate(specs):
        frames, gt = generate_video(spec)
        name = f"video_{k:04d}"
        write_video(directory / name, frames, gt)
        names.append(name)
    return names


def list_videos(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"dataset directory not found: {directory}")
    vids = sorted(p for p in directory.iterdir() if (p / "frames.bin").is_file())
    if not vids:
        raise ValidationError(f"no videos under {directory}")
    return vids


def static_variant(spec: SceneSpec) -> SceneSpec:
    """Same scene with every motion switched off."""
    scene = build_scene(spec)
    still = tuple(replace(s, velocity=(0.0, 0.0), wobble_amp=(0.0, 0.0)) for s in scene.sprites)
    return replace(spec, sprites=still, background_drift=(0.0, 0.0))
