"""Entropy-based uncertainty scoring and top-K region extraction.

Per-point Shannon entropy H(p) = -sum_c p_c log p_c (natural log, with
0 log 0 = 0) over softmax class probabilities; the K = ceil(ratio * N)
highest-entropy points form the sparse uncertainty view.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .points import PointCloud
from .range_geometry import RangeImage, SensorConfig, project_points


@dataclass
class UncertaintyField:
    probs: np.ndarray    # (N, C)
    entropy: np.ndarray  # (N,)


def entropy_of_probs(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats; zero entries contribute zero."""
    p = np.asarray(probs, dtype=np.float64)
    out = np.zeros(p.shape[0])
    nz = p > 0
    plogp = np.zeros_like(p)
    plogp[nz] = p[nz] * np.log(p[nz])
    np.negative(plogp.sum(axis=1), out=out)
    # guard against -0.0 so exact cases compare cleanly
    return out + 0.0


def entropy_map(logits: np.ndarray) -> UncertaintyField:
    """Softmax (max-shifted for stability) followed by entropy per point."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise DataError(f"logits must be (N, C>=2), got {z.shape}")
    if z.shape[0] == 0:
        raise DataError("logits field is empty")
    if not np.isfinite(z).all():
        raise DataError("logits contain non-finite values")
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return UncertaintyField(probs=p, entropy=entropy_of_probs(p))


def select_topk(field: UncertaintyField, ratio: float) -> np.ndarray:
    """Indices of the ceil(ratio * N) most-entropic points, ascending.

    Ties break toward the smaller point index.
    """
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
    h = np.asarray(field.entropy, dtype=np.float64)
    n = h.shape[0]
    if n == 0:
        raise DataError("cannot select from an empty field")
    k = math.ceil(ratio * n)
    order = np.argsort(-h, kind="stable")[:k]
    return np.sort(order)


def build_uncertainty_view(cloud: PointCloud, selected: np.ndarray,
                           cfg: SensorConfig) -> RangeImage:
    """Project only the selected points; the result is the sparse view."""
    idx = np.asarray(selected)
    if idx.size == 0:
        raise DataError("selection is empty")
    if idx.min() < 0 or idx.max() >= len(cloud):
        raise DataError("selection indices out of range")
    sub = PointCloud(cloud.xyz[idx], cloud.intensity[idx])
    img, _ = project_points(sub, cfg)
    return img
