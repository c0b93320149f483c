"""Point/logit/range-image file formats and a deterministic synthetic world.

Formats, all little-endian:
  .bin   N x (x, y, z, intensity) float32 records
  .lgt   u32 point count, u32 column count, then N*C float32
  .u4dr  magic "U4DR", u16 version, u16 L/H/W, per-frame float32
         (depth, intensity) planes for all frames, then L*H*W mask bytes
  .lbl   u32 count, then N u32 class ids

The synthetic world ray-casts ground, boxes, and poles through the
sensor's pixel-center grid, so its clouds project back without drops or
collisions. Everything is a pure function of (config, seed).
"""

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FileFormatError
from .points import PointCloud
from .range_geometry import RangeImage, SensorConfig, pixel_ray_directions
from .rigid import RigidTransform, rotation_about_z

_CONTAINER_MAGIC = b"U4DR"
_CONTAINER_VERSION = 1


# ------------------------------------------------------------------ .bin


def write_point_bin(cloud: PointCloud, path) -> int:
    data = cloud.as_array().astype("<f4").tobytes()
    Path(path).write_bytes(data)
    return len(data)


def read_point_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise FileFormatError(f"{path}: length {len(raw)} is not a multiple of 16")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.isfinite(arr).all():
        raise DataError(f"{path}: non-finite values in point records")
    return PointCloud(arr[:, :3], np.clip(arr[:, 3], 0.0, 1.0))


# ------------------------------------------------------------------ .lgt


def write_logits(field_arr: np.ndarray, path) -> int:
    arr = np.asarray(field_arr, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"logit field must be 2-d, got shape {arr.shape}")
    header = struct.pack("<II", arr.shape[0], arr.shape[1])
    data = header + arr.tobytes()
    Path(path).write_bytes(data)
    return len(data)


def read_logits(path, expected_points: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FileFormatError(f"{path}: too short for a logit header ({len(raw)} bytes)")
    n, c = struct.unpack_from("<II", raw)
    want = 8 + 4 * n * c
    if len(raw) != want:
        raise FileFormatError(f"{path}: expected {want} bytes for {n}x{c}, got {len(raw)}")
    if expected_points is not None and n != expected_points:
        raise FileFormatError(
            f"{path}: record count {n} does not match companion point count {expected_points}"
        )
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, c).copy()


# ------------------------------------------------------------------ .u4dr


def write_range_container(frames, path) -> int:
    if not frames:
        raise DataError("cannot write an empty range container")
    h, w = frames[0].shape
    length = len(frames)
    for f in frames:
        if f.shape != (h, w):
            raise DataError("all frames in a container must share one grid")
    if max(length, h, w) > 0xFFFF:
        raise DataError("container dimensions exceed u16 range")

    header = _CONTAINER_MAGIC + struct.pack("<HHHH", _CONTAINER_VERSION, length, h, w)
    planes = np.stack(
        [np.stack([f.depth, f.intensity]) for f in frames]
    ).astype("<f4")  # (L, 2, H, W)
    masks = np.stack([f.mask for f in frames]).astype(np.uint8)
    data = header + planes.tobytes() + masks.tobytes()
    Path(path).write_bytes(data)
    return len(data)


def read_range_container(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FileFormatError(f"{path}: too short for a container header")
    if raw[:4] != _CONTAINER_MAGIC:
        raise FileFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, length, h, w = struct.unpack_from("<HHHH", raw, 4)
    if version != _CONTAINER_VERSION:
        raise FileFormatError(f"{path}: unsupported container version {version}")
    n_float = length * 2 * h * w
    want = 12 + 4 * n_float + length * h * w
    if len(raw) != want:
        raise FileFormatError(f"{path}: expected {want} bytes, got {len(raw)}")
    planes = np.frombuffer(raw, dtype="<f4", offset=12, count=n_float).reshape(length, 2, h, w)
    masks = np.frombuffer(raw, dtype=np.uint8, offset=12 + 4 * n_float).reshape(length, h, w)
    if not np.isin(masks, (0, 1)).all():
        raise DataError(f"{path}: mask bytes outside {{0, 1}}")
    return [
        RangeImage(planes[t, 0].copy(), planes[t, 1].copy(), masks[t].copy())
        for t in range(length)
    ]


# ------------------------------------------------------------------ .lbl / poses


def write_labels(ids: np.ndarray, path) -> int:
    arr = np.asarray(ids)
    if arr.ndim != 1 or (arr < 0).any():
        raise DataError("labels must be a flat array of non-negative ids")
    data = struct.pack("<I", len(arr)) + arr.astype("<u4").tobytes()
    Path(path).write_bytes(data)
    return len(data)


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FileFormatError(f"{path}: too short for a label header")
    (n,) = struct.unpack_from("<I", raw)
    if len(raw) != 4 + 4 * n:
        raise FileFormatError(f"{path}: expected {4 + 4 * n} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<u4", offset=4).astype(np.int64)


def write_poses_csv(poses, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"r{i}{j}" for i in range(3) for j in range(3)]
                   + ["tx", "ty", "tz"])
        for t, pose in enumerate(poses):
            row = [t] + [repr(float(v)) for v in pose.rotation.ravel()] \
                + [repr(float(v)) for v in pose.translation]
            w.writerow(row)


def read_poses_csv(path):
    poses = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = np.array([float(row[f"r{i}{j}"]) for i in range(3) for j in range(3)])
            t = np.array([float(row["tx"]), float(row["ty"]), float(row["tz"])])
            poses.append(RigidTransform(r.reshape(3, 3), t))
    return poses


# ------------------------------------------------------------ synthetic world


@dataclass
class SequenceSample:
    """Frames in sensor coordinates plus poses, labels, and logits."""

    frames: list
    ego_poses: list
    labels: list
    logits: list
    instance_ids: list = field(default_factory=list)
    boundary_flags: list = field(default_factory=list)


@dataclass
class SynthConfig:
    sensor: SensorConfig
    n_frames: int = 6
    n_boxes: int = 4
    n_poles: int = 6
    extent: float = 45.0
    sensor_height: float = 1.8
    speed: float = 0.4
    yaw_rate: float = 0.02
    moving_fraction: float = 0.25
    box_speed: float = 0.25
    long_range_fraction: float = 0.6

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigError("n_frames must be at least 1")
        if not (1 <= self.n_boxes <= 8):
            raise ConfigError("n_boxes must be in [1, 8]")
        if self.n_poles < 0:
            raise ConfigError("n_poles must be non-negative")
        if not (0.0 <= self.moving_fraction <= 1.0):
            raise ConfigError("moving_fraction must lie in [0, 1]")
        if self.extent <= 20.0:
            raise ConfigError("extent must exceed 20 m")


CLASS_GROUND, CLASS_BOX, CLASS_POLE = 0, 1, 2
N_CLASSES = 3


def _ray_aabb(origins, dirs, lo, hi):
    """Slab test; returns hit distance per ray, +inf when missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - origins) / dirs
        t2 = (hi[None, :] - origins) / dirs
    tlo = np.nanmin(np.stack([t1, t2]), axis=0).max(axis=1)
    thi = np.nanmax(np.stack([t1, t2]), axis=0).min(axis=1)
    hit = (thi >= tlo) & (thi > 1e-6)
    d = np.where(tlo > 1e-6, tlo, thi)  # if origin inside, exit face
    return np.where(hit, d, np.inf)


def synth_world(cfg: SynthConfig, seed: int) -> SequenceSample:
    """Deterministic boxes-and-poles world sampled by pixel-center rays.

    Per-point class labels use 0=ground, 1=box, 2=pole. Synthetic logits
    are sharp for interior returns and deliberately flat near class or
    depth boundaries and at long range; `boundary_flags` records which
    points were treated as uncertain.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    sensor = cfg.sensor

    # box ring: distinct azimuth sectors so boxes never fully occlude each other
    sector = 2.0 * math.pi / cfg.n_boxes
    box_lo, box_hi, box_vel = [], [], []
    n_moving = int(round(cfg.moving_fraction * cfg.n_boxes))
    for k in range(cfg.n_boxes):
        az = k * sector + rng.uniform(0.25, 0.75) * sector
        r = rng.uniform(9.0, 16.0)
        cx, cy = r * math.cos(az), r * math.sin(az)
        hx, hy = rng.uniform(1.5, 2.2, 2)
        hz = rng.uniform(1.6, 3.0)
        box_lo.append([cx - hx, cy - hy, 0.0])
        box_hi.append([cx + hx, cy + hy, hz])
        if k < n_moving:
            phi = rng.uniform(0, 2 * math.pi)
            box_vel.append([cfg.box_speed * math.cos(phi), cfg.box_speed * math.sin(phi), 0.0])
        else:
            box_vel.append([0.0, 0.0, 0.0])
    box_lo = np.array(box_lo)
    box_hi = np.array(box_hi)
    box_vel = np.array(box_vel)

    pole_lo, pole_hi = [], []
    for _ in range(cfg.n_poles):
        az = rng.uniform(0, 2 * math.pi)
        r = rng.uniform(6.0, 28.0)
        cx, cy = r * math.cos(az), r * math.sin(az)
        half = 0.15
        pole_lo.append([cx - half, cy - half, 0.0])
        pole_hi.append([cx + half, cy + half, rng.uniform(2.5, 5.0)])
    pole_lo = np.array(pole_lo).reshape(cfg.n_poles, 3)
    pole_hi = np.array(pole_hi).reshape(cfg.n_poles, 3)

    heading0 = rng.uniform(0, 2 * math.pi)
    rays_sensor = pixel_ray_directions(sensor).reshape(-1, 3)
    h_img, w_img = sensor.height, sensor.width

    frames, poses, labels_all, logits_all, inst_all, flags_all = [], [], [], [], [], []
    pos = np.array([0.0, 0.0, 0.0])
    heading = heading0
    for t in range(cfg.n_frames):
        rot = rotation_about_z(heading)
        origin = pos + np.array([0.0, 0.0, cfg.sensor_height])
        pose = RigidTransform(rot, origin)
        dirs = rays_sensor @ rot.T
        origins = np.broadcast_to(origin, dirs.shape)

        best_d = np.full(len(dirs), np.inf)
        best_cls = np.full(len(dirs), -1, dtype=np.int64)
        best_inst = np.full(len(dirs), -1, dtype=np.int64)

        # ground plane z=0 within the world extent
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -origin[2] / dirs[:, 2]
        gx = origin[0] + tg * dirs[:, 0]
        gy = origin[1] + tg * dirs[:, 1]
        ok = (tg > 1e-6) & (np.abs(gx) <= cfg.extent) & (np.abs(gy) <= cfg.extent)
        best_d = np.where(ok, tg, best_d)
        best_cls = np.where(ok, CLASS_GROUND, best_cls)

        for k in range(cfg.n_boxes):
            shift = box_vel[k] * t
            d = _ray_aabb(origins, dirs, box_lo[k] + shift, box_hi[k] + shift)
            closer = d < best_d
            best_d = np.where(closer, d, best_d)
            best_cls = np.where(closer, CLASS_BOX, best_cls)
            best_inst = np.where(closer, k, best_inst)
        for k in range(cfg.n_poles):
            d = _ray_aabb(origins, dirs, pole_lo[k], pole_hi[k])
            closer = d < best_d
            best_d = np.where(closer, d, best_d)
            best_cls = np.where(closer, CLASS_POLE, best_cls)
            best_inst = np.where(closer, cfg.n_boxes + k, best_inst)

        hit = np.isfinite(best_d) & (best_d <= sensor.d_max)
        d = best_d[hit]
        cls = best_cls[hit]
        inst = best_inst[hit]
        pts = rays_sensor[hit] * d[:, None]  # sensor frame, exactly on pixel rays

        az = np.arctan2(pts[:, 1], pts[:, 0])
        el = np.arcsin(pts[:, 2] / d)
        base = np.choose(cls, [0.25, 0.7, 0.5])
        inten = np.clip(base - 0.2 * d / sensor.d_max + 0.05 * np.sin(3 * az + 2 * el),
                        0.05, 1.0)

        # silhouette detection on the label/depth grids
        cls_img = np.full(h_img * w_img, -1, dtype=np.int64)
        d_img = np.zeros(h_img * w_img)
        cls_img[hit] = cls
        d_img[hit] = d
        cls_img = cls_img.reshape(h_img, w_img)
        d_img = d_img.reshape(h_img, w_img)
        edge = np.zeros((h_img, w_img), dtype=bool)
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            ncls = np.roll(cls_img, shift, axis=axis)
            nd = np.roll(d_img, shift, axis=axis)
            diff = (ncls != cls_img) | (np.abs(nd - d_img) > 2.0)
            if axis == 0:  # elevation does not wrap
                if shift == 1:
                    diff[0, :] = False
                else:
                    diff[-1, :] = False
            edge |= diff
        flat_edge = edge.reshape(-1)[hit]
        uncertain = flat_edge | (d > cfg.long_range_fraction * sensor.d_max)

        sharp = np.where(uncertain, rng.uniform(0.1, 1.0, len(d)), rng.uniform(3.0, 6.0, len(d)))
        logits = rng.normal(0.0, 0.05, (len(d), N_CLASSES))
        logits[np.arange(len(d)), cls] += sharp

        frames.append(PointCloud(pts, inten))
        poses.append(pose)
        labels_all.append(cls)
        logits_all.append(logits.astype(np.float32))
        inst_all.append(inst)
        flags_all.append(uncertain)

        pos = pos + cfg.speed * np.array([math.cos(heading), math.sin(heading), 0.0])
        heading += cfg.yaw_rate

    return SequenceSample(frames, poses, labels_all, logits_all, inst_all, flags_all)
