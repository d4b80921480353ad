"""RoIAlign over a single feature map, followed by spatial mean pooling.

Conventions: cell ``(row r, col c)`` has its centre at continuous image
coordinate ``(x=c+0.5, y=r+0.5)`` after scaling by ``spatial_scale``. Inside
each of the ``P x P`` bins, the ``s``-th of ``S`` samples per axis sits at
fractional position ``(s - 0.5) / S``. Samples outside the map interpolate
against zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import BoundingBox


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (C, H, W)
    spatial_scale: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"feature map must be C x H x W, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("feature map has non-finite entries")
        if not self.spatial_scale > 0:
            raise ValidationError("spatial_scale must be positive")
        object.__setattr__(self, "data", data)

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
class RoiConfig:
    pool_size: int = 7
    samples_per_bin: int = 2

    def __post_init__(self):
        if self.pool_size < 1 or self.samples_per_bin < 1:
            raise ValidationError("pool_size and samples_per_bin must be >= 1")


def sample_coords(start: float, length: float, cfg: RoiConfig) -> np.ndarray:
    """Continuous sample coordinates along one axis, shape (P, S)."""
    p = np.arange(cfg.pool_size)[:, None]
    s = (np.arange(cfg.samples_per_bin)[None, :] + 0.5) / cfg.samples_per_bin
    return start + (p + s) * (length / cfg.pool_size)


def _axis_lookup(coords: np.ndarray):
    g = coords - 0.5
    lo = np.floor(g).astype(np.int64)
    t = g - lo
    return lo, lo + 1, t


def _gather(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    _, h, w = data.shape
    rv = (rows >= 0) & (rows < h)
    cv = (cols >= 0) & (cols < w)
    out = data[:, np.clip(rows, 0, h - 1)[:, None], np.clip(cols, 0, w - 1)[None, :]]
    return np.where((rv[:, None] & cv[None, :])[None], out, 0.0)


def _lerp(a, b, t):
    # a + t*(b - a) keeps a == b exact
    return a + t * (b - a)


def roi_align(fmap: FeatureMap, box: BoundingBox, cfg: RoiConfig = RoiConfig()) -> np.ndarray:
    """Bilinear RoIAlign of one box. Returns an array of shape (C, P, P)."""
    if not isinstance(box, BoundingBox):
        raise ValidationError("box must be a BoundingBox")
    sc = fmap.spatial_scale
    x0, y0, w, h = box.x * sc, box.y * sc, box.w * sc, box.h * sc
    if x0 >= fmap.width or y0 >= fmap.height or x0 + w <= 0 or y0 + h <= 0:
        raise ValidationError(f"box {box} lies entirely outside the feature map")

    ys = sample_coords(y0, h, cfg).ravel()
    xs = sample_coords(x0, w, cfg).ravel()
    r0, r1, ty = _axis_lookup(ys)
    c0, c1, tx = _axis_lookup(xs)

    data = fmap.data
    top = _lerp(_gather(data, r0, c0), _gather(data, r0, c1), tx[None, None, :])
    bottom = _lerp(_gather(data, r1, c0), _gather(data, r1, c1), tx[None, None, :])
    vals = _lerp(top, bottom, ty[None, :, None])

    p, s = cfg.pool_size, cfg.samples_per_bin
    vals = vals.reshape(fmap.channels, p, s, p, s).transpose(0, 1, 3, 2, 4)
    vals = vals.reshape(fmap.channels, p, p, s * s)
    ref = vals[..., :1]
    return ref[..., 0] + np.mean(vals - ref, axis=-1)


def pool_region_feature(aligned: np.ndarray) -> np.ndarray:
    """Channel-wise mean over the pooled grid: (C, P, P) -> (C,)."""
    aligned = np.asarray(aligned, dtype=np.float64)
    if aligned.ndim != 3:
        raise ValidationError(f"expected C x P x P tensor, got shape {aligned.shape}")
    if not np.all(np.isfinite(aligned)):
        raise ValidationError("aligned tensor has non-finite entries")
    flat = aligned.reshape(aligned.shape[0], -1)
    ref = flat[:, :1]
    return ref[:, 0] + np.mean(flat - ref, axis=1)


def extract_region_feature(fmap: FeatureMap, box: BoundingBox, cfg: RoiConfig = RoiConfig()) -> np.ndarray:
    return pool_region_feature(roi_align(fmap, box, cfg))
