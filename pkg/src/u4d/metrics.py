"""Evaluation suite: distribution fidelity, temporal coherence, calibration.

Distances over feature moments (Frechet form), BEV occupancy divergence,
kernel two-sample distance, Chamfer, ICP-based frame-to-frame transform
errors, calibration error, and mean IoU. Everything is pure and operates
on numpy arrays or PointCloud objects; nearest-neighbour queries go
through a k-d tree and accept a `workers` thread count.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ConfigError,
    DataError,
    DegeneracyError,
    InsufficientDataError,
    ShapeError,
)
from .points import PointCloud
from .rigid import RigidTransform


def _xyz(obj) -> np.ndarray:
    pts = obj.xyz if isinstance(obj, PointCloud) else np.asarray(obj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) points, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise DataError("points contain non-finite values")
    return pts


# ----------------------------------------------------------------- moments


@dataclass
class FeatureMoments:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        d = self.mu.shape[0]
        if self.mu.ndim != 1 or self.sigma.shape != (d, d):
            raise ShapeError(f"inconsistent moment shapes {self.mu.shape} / {self.sigma.shape}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-8):
            raise DataError("covariance is not symmetric")


def feature_moments(features) -> FeatureMoments:
    """Sample mean and covariance (divisor N - 1) of an (N, D) matrix."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"features must be (N, D), got {f.shape}")
    if f.shape[0] < 2:
        raise InsufficientDataError("need at least two feature rows for a covariance")
    if not np.isfinite(f).all():
        raise DataError("features contain non-finite values")
    mu = f.mean(axis=0)
    xc = f - mu
    sigma = xc.T @ xc / (f.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return FeatureMoments(mu, sigma, f.shape[0])


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def gaussian_frechet(a: FeatureMoments, b: FeatureMoments) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term uses the eigendecomposition of the symmetrized product
    S_a^{1/2} S_b S_a^{1/2} with negative eigenvalues clamped to zero;
    identical moments short-circuit to exactly 0.
    """
    if a.mu.shape != b.mu.shape:
        raise ShapeError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    if np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma):
        return 0.0
    delta = a.mu - b.mu
    ah = _psd_sqrt(a.sigma)
    inner = ah @ b.sigma @ ah
    inner = 0.5 * (inner + inner.T)
    w = np.clip(np.linalg.eigh(inner)[0], 0.0, None)
    tr_cross = float(np.sqrt(w).sum())
    val = float(delta @ delta + np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * tr_cross
    return max(val, 0.0)


# -------------------------------------------------------------- histograms


@dataclass
class BevHistogram:
    """Top-down occupancy over [-extent, extent]^2; rows bin x, columns y."""

    grid: np.ndarray
    extent: float
    bins: int

    @property
    def bin_size(self) -> float:
        return 2.0 * self.extent / self.bins

    @property
    def is_empty(self) -> bool:
        return not self.grid.any()


def bev_histogram(cloud, extent: float = 80.0, bins: int = 100) -> BevHistogram:
    if extent <= 0.0:
        raise ConfigError("extent must be positive")
    if bins < 1:
        raise ConfigError("bins must be at least 1")
    xyz = _xyz(cloud)
    keep = (np.abs(xyz[:, 0]) < extent) & (np.abs(xyz[:, 1]) < extent)
    pts = xyz[keep]
    grid = np.zeros((bins, bins))
    if len(pts):
        size = 2.0 * extent / bins
        ix = np.clip(((pts[:, 0] + extent) / size).astype(int), 0, bins - 1)
        iy = np.clip(((pts[:, 1] + extent) / size).astype(int), 0, bins - 1)
        np.add.at(grid, (ix, iy), 1.0)
        grid /= grid.sum()
    return BevHistogram(grid, float(extent), int(bins))


def _hist_grid(h) -> np.ndarray:
    if isinstance(h, BevHistogram):
        if h.is_empty:
            raise DataError("histogram is empty; divergence undefined")
        return h.grid
    g = np.asarray(h, dtype=np.float64)
    if g.size == 0 or not g.any():
        raise DataError("histogram is empty; divergence undefined")
    if (g < 0.0).any() or abs(g.sum() - 1.0) > 1e-9:
        raise DataError("histogram must be nonnegative and sum to 1")
    return g


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; bounded by ln 2."""
    gp, gq = _hist_grid(p), _hist_grid(q)
    if gp.shape != gq.shape:
        raise ShapeError(f"histogram shapes differ: {gp.shape} vs {gq.shape}")
    m = 0.5 * (gp + gq)

    def kl(a):
        nz = a > 0.0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return max(0.5 * kl(gp) + 0.5 * kl(gq), 0.0)


# --------------------------------------------------------------------- mmd


def _sq_dists(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def mmd(x, y, bandwidth=None, biased=False) -> float:
    """Squared MMD with a Gaussian kernel.

    Bandwidth defaults to the median pairwise distance of the pooled
    sample. The unbiased estimator drops kernel diagonals and can go
    slightly negative around zero.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.ndim != 2 or ya.ndim != 2 or xa.shape[1] != ya.shape[1]:
        raise ShapeError(f"sample shapes incompatible: {xa.shape} vs {ya.shape}")
    if len(xa) == 0 or len(ya) == 0:
        raise DataError("mmd needs nonempty samples")
    if not biased and (len(xa) < 2 or len(ya) < 2):
        raise InsufficientDataError("unbiased mmd needs at least two samples per side")
    if bandwidth is None:
        z = np.vstack([xa, ya])
        iu = np.triu_indices(len(z), k=1)
        med = float(np.median(np.sqrt(_sq_dists(z, z)[iu])))
        bandwidth = med if med > 0.0 else 1.0
    g = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-g * _sq_dists(xa, xa))
    kyy = np.exp(-g * _sq_dists(ya, ya))
    kxy = np.exp(-g * _sq_dists(xa, ya))
    if biased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    n, m = len(xa), len(ya)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


# ----------------------------------------------------------------- chamfer


def chamfer(p, q, workers: int = 1) -> float:
    """Symmetric mean squared nearest-neighbour distance."""
    pa, qa = _xyz(p), _xyz(q)
    if len(pa) == 0 or len(qa) == 0:
        raise DataError("chamfer is undefined for empty clouds")
    d_pq = cKDTree(qa).query(pa, workers=workers)[0]
    d_qp = cKDTree(pa).query(qa, workers=workers)[0]
    return float(np.mean(d_pq ** 2) + np.mean(d_qp ** 2))


# --------------------------------------------------------------------- icp


def _kabsch(p: np.ndarray, q: np.ndarray) -> RigidTransform:
    pm, qm = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - pm, q - qm
    h = pc.T @ qc
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise DegeneracyError("correspondence geometry is rank-deficient")
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0.0 else -1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, qm - r @ pm)


def icp_align(src, dst, max_iters: int = 50, tol: float = 1e-9,
              max_corr_dist=None, workers: int = 1):
    """Point-to-point ICP; returns (dst<-src transform, rms residual, iters)."""
    ps, pd = _xyz(src), _xyz(dst)
    if len(ps) < 3 or len(pd) < 3:
        raise DegeneracyError("icp needs at least three points per cloud")
    tree = cKDTree(pd)
    tf = RigidTransform(np.eye(3), np.zeros(3))
    residual = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        dist, idx = tree.query(tf.apply(ps), workers=workers)
        if max_corr_dist is not None:
            keep = dist <= max_corr_dist
            if int(keep.sum()) < 3:
                raise DegeneracyError(
                    f"only {int(keep.sum())} correspondences within {max_corr_dist} m")
            pairs_src, pairs_dst = ps[keep], pd[idx[keep]]
        else:
            pairs_src, pairs_dst = ps, pd[idx]
        new = _kabsch(pairs_src, pairs_dst)
        delta = np.linalg.norm(new.rotation - tf.rotation) \
            + np.linalg.norm(new.translation - tf.translation)
        tf = new
        residual = float(np.sqrt(np.mean(
            np.sum((tf.apply(pairs_src) - pairs_dst) ** 2, axis=1))))
        if delta < tol:
            break
    return tf, residual, it


# ----------------------------------------------------- temporal consistency


@dataclass
class TemporalReport:
    ttce_rot: float
    ttce_trans: float
    ctc: dict
    n_pairs: int
    transform_source: str


def temporal_consistency(seq, gt_transforms, intervals=(1,),
                         pred_transforms=None, workers: int = 1) -> TemporalReport:
    """Frame-to-frame transform errors plus aligned Chamfer per interval.

    Predicted unit-interval transforms come from `pred_transforms` when
    given, otherwise from ICP between consecutive frames; the report
    records which. CTC at interval k aligns frame t+k back into frame t
    through the composed ground-truth motion before taking Chamfer.
    """
    frames = [_xyz(f) for f in seq]
    n = len(frames)
    if n < 2:
        raise InsufficientDataError("need at least two frames")
    if len(gt_transforms) != n - 1:
        raise DataError(f"need {n - 1} ground-truth transforms, got {len(gt_transforms)}")
    for k in intervals:
        if k < 1:
            raise ConfigError("intervals must be at least 1")
        if n < k + 1:
            raise InsufficientDataError(
                f"sequence of {n} frames has no interval-{k} pairs")
    if pred_transforms is not None:
        if len(pred_transforms) != n - 1:
            raise DataError(
                f"need {n - 1} predicted transforms, got {len(pred_transforms)}")
        preds = list(pred_transforms)
        source = "provided"
    else:
        preds = [icp_align(frames[t], frames[t + 1], workers=workers)[0]
                 for t in range(n - 1)]
        source = "icp"

    rot = float(np.mean([np.linalg.norm(p.rotation - g.rotation)
                         for p, g in zip(preds, gt_transforms)]))
    trans = float(np.mean([np.linalg.norm(p.translation - g.translation)
                           for p, g in zip(preds, gt_transforms)]))
    ctc = {}
    for k in intervals:
        vals = []
        for t in range(n - k):
            comp = gt_transforms[t]
            for j in range(t + 1, t + k):
                comp = gt_transforms[j].compose(comp)
            back = comp.inverse().apply(frames[t + k])
            vals.append(chamfer(frames[t], back, workers=workers))
        ctc[int(k)] = float(np.mean(vals))
    return TemporalReport(rot, trans, ctc, n - 1, source)


# --------------------------------------------------------------------- ece


def ece(confidences, correct, bins: int = 15) -> float:
    """Expected calibration error over right-closed equal-width bins."""
    if bins < 1:
        raise ConfigError("bins must be at least 1")
    c = np.asarray(confidences, dtype=np.float64)
    k = np.asarray(correct, dtype=bool)
    if c.ndim != 1 or c.shape != k.shape:
        raise ShapeError(f"confidence/correct shapes differ: {c.shape} vs {k.shape}")
    if c.size == 0:
        raise DataError("ece needs at least one sample")
    if not np.isfinite(c).all() or (c < 0.0).any() or (c > 1.0).any():
        raise DataError("confidences must lie in [0, 1]")
    idx = np.clip(np.ceil(c * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for m in range(bins):
        sel = idx == m
        nm = int(sel.sum())
        if nm == 0:
            continue
        total += (nm / c.size) * abs(float(k[sel].mean()) - float(c[sel].mean()))
    return float(total)


# -------------------------------------------------------------------- miou


def miou(pred, gt, n_classes: int) -> float:
    """Mean IoU over the classes present in either labeling."""
    if n_classes < 1:
        raise ConfigError("n_classes must be at least 1")
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.ndim != 1 or p.shape != g.shape:
        raise ShapeError(f"label shapes differ: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise DataError("miou needs at least one point")
    for arr in (p, g):
        if (arr < 0).any() or (arr >= n_classes).any():
            raise DataError("class id out of range")
    ious = []
    for c in range(n_classes):
        pc, gc = p == c, g == c
        union = int((pc | gc).sum())
        if union == 0:
            continue
        ious.append(int((pc & gc).sum()) / union)
    return float(np.mean(ious))
