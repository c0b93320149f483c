"""Spherical range-image projection and log-depth model encoding.

A sensor with H beams and W azimuth steps maps a point p = (x, y, z) at
range d = |p| to continuous image coordinates

    u = 0.5 * (1 - atan2(y, x) / pi) * W
    v = (1 - (arcsin(z / d) - fov_down) / (fov_up - fov_down)) * H

and stores the radial range at the integer pixel (floor(v) clamped to
[0, H-1], floor(u) mod W), keeping the nearest return on collisions.
Model tensors encode depth as 2 * log2(d + 1) / log2(d_max + 1) - 1 and
intensity as 2 * i - 1, with -1 as the sentinel on empty pixels.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .points import PointCloud


@dataclass(frozen=True)
class SensorConfig:
    height: int
    width: int
    fov_up_deg: float
    fov_down_deg: float
    d_max: float

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ConfigError("sensor grid dimensions must be positive")
        if self.fov_up_deg <= self.fov_down_deg:
            raise ConfigError("fov_up_deg must exceed fov_down_deg")
        if self.d_max <= 0:
            raise ConfigError("d_max must be positive")

    @property
    def fov_up(self) -> float:
        return math.radians(self.fov_up_deg)

    @property
    def fov_down(self) -> float:
        return math.radians(self.fov_down_deg)

    @property
    def fov_span(self) -> float:
        return self.fov_up - self.fov_down

    @property
    def azimuth_pitch(self) -> float:
        return 2.0 * math.pi / self.width

    @property
    def elevation_pitch(self) -> float:
        return self.fov_span / self.height


PROFILES = {
    "nuscenes": SensorConfig(32, 1024, 10.0, -30.0, 80.0),
    "kitti": SensorConfig(64, 1024, 3.0, -25.0, 80.0),
    "toy": SensorConfig(16, 64, 10.0, -30.0, 80.0),
}


@dataclass
class RangeImage:
    """Depth/intensity grids plus a validity mask; mask=0 pixels hold 0."""

    depth: np.ndarray
    intensity: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.intensity = np.asarray(self.intensity, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.depth.ndim != 2:
            raise ShapeError(f"depth must be 2-d, got {self.depth.shape}")
        if self.intensity.shape != self.depth.shape or self.mask.shape != self.depth.shape:
            raise ShapeError("depth, intensity, and mask shapes must match")

    @property
    def shape(self):
        return self.depth.shape

    @classmethod
    def blank(cls, height: int, width: int) -> "RangeImage":
        return cls(
            np.zeros((height, width), np.float32),
            np.zeros((height, width), np.float32),
            np.zeros((height, width), np.uint8),
        )


@dataclass
class ProjectionStats:
    n_in: int = 0
    n_kept: int = 0
    n_dropped_fov: int = 0
    n_dropped_range: int = 0
    n_collided: int = 0


def project_points(cloud: PointCloud, cfg: SensorConfig):
    """Project a cloud onto the sensor grid.

    Returns (RangeImage, ProjectionStats). Points outside the vertical
    field of view or beyond d_max (or with non-positive range) are
    dropped silently and counted; pixel collisions keep the nearest
    return.
    """
    xyz = cloud.xyz
    n_in = len(cloud)
    d = np.linalg.norm(xyz, axis=1)

    in_range = (d > 0.0) & (d <= cfg.d_max)
    elev = np.zeros(n_in)
    np.arcsin(np.divide(xyz[:, 2], d, out=np.ones(n_in), where=in_range), out=elev)
    in_fov = (elev >= cfg.fov_down) & (elev <= cfg.fov_up)
    keep = in_range & in_fov

    stats = ProjectionStats(
        n_in=n_in,
        n_dropped_range=int((~in_range).sum()),
        n_dropped_fov=int((in_range & ~in_fov).sum()),
    )

    img = RangeImage.blank(cfg.height, cfg.width)
    if not keep.any():
        return img, stats

    xyz, d, elev = xyz[keep], d[keep], elev[keep]
    inten = cloud.intensity[keep]

    u = 0.5 * (1.0 - np.arctan2(xyz[:, 1], xyz[:, 0]) / math.pi) * cfg.width
    v = (1.0 - (elev - cfg.fov_down) / cfg.fov_span) * cfg.height
    cols = np.floor(u).astype(np.int64) % cfg.width
    rows = np.clip(np.floor(v).astype(np.int64), 0, cfg.height - 1)

    # write far-to-near so the nearest return survives a pixel collision
    order = np.argsort(-d, kind="stable")
    rows, cols = rows[order], cols[order]
    img.depth[rows, cols] = d[order]
    img.intensity[rows, cols] = inten[order]
    img.mask[rows, cols] = 1

    n_cells = len(np.unique(rows * cfg.width + cols))
    stats.n_kept = n_cells
    stats.n_collided = len(d) - n_cells
    return img, stats


def pixel_ray_directions(cfg: SensorConfig) -> np.ndarray:
    """(H, W, 3) unit rays through every pixel center."""
    v = (np.arange(cfg.height) + 0.5) / cfg.height
    u = (np.arange(cfg.width) + 0.5) / cfg.width
    elev = cfg.fov_down + cfg.fov_span * (1.0 - v)
    az = math.pi * (1.0 - 2.0 * u)
    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(az), np.sin(az)
    out = np.empty((cfg.height, cfg.width, 3))
    out[..., 0] = ce[:, None] * ca[None, :]
    out[..., 1] = ce[:, None] * sa[None, :]
    out[..., 2] = se[:, None] * np.ones_like(ca)[None, :]
    return out


def unproject(img: RangeImage, cfg: SensorConfig) -> PointCloud:
    """Valid pixels back to 3-d points along their pixel-center rays."""
    if img.shape != (cfg.height, cfg.width):
        raise ShapeError(f"image {img.shape} does not match sensor grid")
    rows, cols = np.nonzero(img.mask)
    rays = pixel_ray_directions(cfg)[rows, cols]
    d = img.depth[rows, cols].astype(np.float64)
    return PointCloud(rays * d[:, None], img.intensity[rows, cols].astype(np.float64))


def _depth_scale(cfg: SensorConfig) -> float:
    return math.log2(cfg.d_max + 1.0)


def encode_model_input(img: RangeImage, cfg: SensorConfig) -> np.ndarray:
    """RangeImage to a (2, H, W) float64 tensor in [-1, 1].

    Channel 0 is log-compressed depth, channel 1 intensity; pixels with
    mask=0 carry -1 in both channels.
    """
    if img.shape != (cfg.height, cfg.width):
        raise ShapeError(f"image {img.shape} does not match sensor grid")
    valid = img.mask.astype(bool)
    x = np.full((2, cfg.height, cfg.width), -1.0)
    d = np.clip(img.depth.astype(np.float64), 0.0, cfg.d_max)
    x[0][valid] = 2.0 * np.log2(d[valid] + 1.0) / _depth_scale(cfg) - 1.0
    x[1][valid] = 2.0 * np.clip(img.intensity.astype(np.float64)[valid], 0.0, 1.0) - 1.0
    return x


def decode_model_output(x: np.ndarray, mask: np.ndarray, cfg: SensorConfig) -> RangeImage:
    """Inverse of encode_model_input; clips model values to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask)
    if x.shape != (2, cfg.height, cfg.width):
        raise ShapeError(f"model tensor must be (2, {cfg.height}, {cfg.width}), got {x.shape}")
    if mask.shape != (cfg.height, cfg.width):
        raise ShapeError(f"mask must be ({cfg.height}, {cfg.width}), got {mask.shape}")
    xc = np.clip(x, -1.0, 1.0)
    depth = np.exp2(0.5 * (xc[0] + 1.0) * _depth_scale(cfg)) - 1.0
    depth = np.clip(depth, 0.0, cfg.d_max)
    inten = np.clip(0.5 * (xc[1] + 1.0), 0.0, 1.0)
    valid = mask.astype(bool)
    depth[~valid] = 0.0
    inten[~valid] = 0.0
    return RangeImage(depth.astype(np.float32), inten.astype(np.float32),
                      valid.astype(np.uint8))


def encode_sequence(frames, cfg: SensorConfig):
    """L range images to model tensors: (2, L, H, W) values, (1, L, H, W) mask."""
    xs = [encode_model_input(f, cfg) for f in frames]
    x = np.stack(xs, axis=1)
    m = np.stack([f.mask.astype(np.float64) for f in frames])[None]
    return x, m


def decode_sequence(x: np.ndarray, m: np.ndarray, cfg: SensorConfig):
    """Inverse of encode_sequence; m is (1, L, H, W) or (L, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m)
    if m.ndim == 4:
        m = m[0]
    length = x.shape[1]
    return [decode_model_output(x[:, t], m[t] > 0.5, cfg) for t in range(length)]
