"""Bilinear sampling of feature maps at normalized image positions.

Coordinate convention (used everywhere in the package): a point ``(x, y)``
lives in ``[0, 1]^2`` relative to the image width and height.  A feature map
of size ``H x W`` tiles the image, and its integer cell ``(i, j)`` sits at
the centre of that tile, i.e. at ``((j + 0.5) / W, (i + 0.5) / H)``.  So the
continuous cell coordinate is ``u = x * W - 0.5``, ``v = y * H - 0.5``.

Neighbours outside the map are clamped to the border (replicate padding).
Points are never clamped implicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError, ValidationError
from .numerics import add_macs


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (C, H, W)
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be C x H x W, got {self.data.shape}")
        if self.data.shape[1] < 2 or self.data.shape[2] < 2:
            raise ShapeError("feature map needs H, W >= 2")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeaturePyramid:
    maps: tuple
    image_size: tuple  # (H_img, W_img)

    def __post_init__(self):
        if not self.maps:
            raise ValidationError("pyramid must have at least one scale")
        strides = [m.stride for m in self.maps]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValidationError(f"pyramid strides must increase strictly, got {strides}")
        h_img, w_img = self.image_size
        for m in self.maps:
            if abs(m.height * m.stride - h_img) >= m.stride or abs(m.width * m.stride - w_img) >= m.stride:
                raise ValidationError(f"scale with stride {m.stride} does not cover a "
                                      f"{h_img}x{w_img} image")

    @classmethod
    def from_arrays(cls, arrays, strides, image_size):
        return cls(tuple(FeatureMap(a, s) for a, s in zip(arrays, strides)), tuple(image_size))

    def __len__(self):
        return len(self.maps)


# --------------------------------------------------------------------------
# interpolation plans


@dataclass
class InterpPlan:
    """Corner indices and weights for a batch of bilinear lookups.

    ``index`` addresses rows of a 2-D "bank" array (one row per feature cell,
    possibly many maps stacked); ``base`` offsets select which map a sample
    reads.  Weight derivatives are w.r.t. normalized x and y.
    """

    index: np.ndarray      # (..., 4) int
    weight: np.ndarray     # (..., 4)
    dweight_dx: np.ndarray  # (..., 4)
    dweight_dy: np.ndarray  # (..., 4)
    n_rows: int

    @property
    def shape(self):
        return self.index.shape[:-1]

    def scatter_matrix(self):
        m = int(np.prod(self.shape, dtype=np.int64))
        rows = np.repeat(np.arange(m), 4)
        return sp.csr_matrix((self.weight.reshape(-1), (self.index.reshape(-1), rows)),
                             shape=(self.n_rows, m))


def make_plan(points, height, width, base=0, n_rows=None) -> InterpPlan:
    """Build an :class:`InterpPlan`.

    ``height``/``width``/``base`` broadcast against ``points[..., 0]`` so a
    single plan can cover maps of different sizes.
    """
    points = np.asarray(points)
    height = np.asarray(height)
    width = np.asarray(width)
    u = points[..., 0] * width - 0.5
    v = points[..., 1] * height - 0.5
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = u - x0
    fy = v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa = np.clip(x0, 0, width - 1)
    xb = np.clip(x0 + 1, 0, width - 1)
    ya = np.clip(y0, 0, height - 1)
    yb = np.clip(y0 + 1, 0, height - 1)
    base = np.asarray(base, dtype=np.int64)
    index = np.stack([ya * width + xa, ya * width + xb, yb * width + xa, yb * width + xb], -1)
    index = index + base[..., None]
    gx, gy = 1 - fx, 1 - fy
    weight = np.stack([gx * gy, fx * gy, gx * fy, fx * fy], -1)
    wx = np.broadcast_to(width, fx.shape)[..., None]
    hy = np.broadcast_to(height, fy.shape)[..., None]
    dwx = np.stack([-gy, gy, -fy, fy], -1) * wx
    dwy = np.stack([-gx, -fx, gx, fx], -1) * hy
    if n_rows is None:
        n_rows = int(index.max()) + 1 if index.size else 0
    return InterpPlan(index, weight.astype(points.dtype, copy=False),
                      dwx.astype(points.dtype, copy=False),
                      dwy.astype(points.dtype, copy=False), n_rows)


def plan_gather(plan: InterpPlan, bank: np.ndarray):
    """Interpolate rows of ``bank`` (n_rows, C); returns ``(values, corners)``."""
    add_macs(plan.weight.size * bank.shape[1])
    corners = bank[plan.index]  # (..., 4, C)
    values = np.einsum("...k,...kc->...c", plan.weight, corners)
    return values, corners


def plan_backward(plan: InterpPlan, corners: np.ndarray, dvalues: np.ndarray, need_bank=True):
    """Gradients of :func:`plan_gather` w.r.t. the bank and the points."""
    dw = np.einsum("...kc,...c->...k", corners, dvalues)
    dpts = np.stack([(dw * plan.dweight_dx).sum(-1), (dw * plan.dweight_dy).sum(-1)], -1)
    dbank = None
    if need_bank:
        c = dvalues.shape[-1]
        dbank = plan.scatter_matrix() @ dvalues.reshape(-1, c)
        dbank = np.asarray(dbank, dtype=dvalues.dtype)
    return dbank, dpts


# --------------------------------------------------------------------------
# public ops


def _as_array(fmap):
    return fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)


def bilinear_sample_forward(fmap, points):
    data = _as_array(fmap)
    c, h, w = data.shape
    points = np.asarray(points, dtype=np.result_type(data, np.float32))
    plan = make_plan(points, h, w, n_rows=h * w)
    bank = data.reshape(c, h * w).T
    values, corners = plan_gather(plan, bank)
    return values, (plan, corners, data.shape)


def bilinear_sample(fmap, points) -> np.ndarray:
    """Sample a (C, H, W) map at normalized ``points`` (..., 2) -> (..., C)."""
    return bilinear_sample_forward(fmap, points)[0]


def bilinear_sample_backward(cache, dvalues):
    """Return ``(dmap, dpoints)``."""
    plan, corners, shape = cache
    dbank, dpts = plan_backward(plan, corners, dvalues)
    c, h, w = shape
    return dbank.T.reshape(c, h, w), dpts


def sample_pyramid_forward(pyr: FeaturePyramid, points):
    outs, caches = [], []
    for m in pyr.maps:
        v, cache = bilinear_sample_forward(m, points)
        outs.append(v)
        caches.append(cache)
    return np.concatenate(outs, axis=-1), caches


def sample_pyramid(pyr: FeaturePyramid, points) -> np.ndarray:
    """Per-scale bilinear samples concatenated in pyramid order."""
    return sample_pyramid_forward(pyr, points)[0]


def sample_pyramid_backward(caches, dvalues):
    """Return ``(list of dmaps, dpoints)``."""
    dmaps, dpts = [], 0
    start = 0
    for cache in caches:
        c = cache[2][0]
        dm, dp = bilinear_sample_backward(cache, dvalues[..., start:start + c])
        dmaps.append(dm)
        dpts = dpts + dp
        start += c
    return dmaps, dpts
