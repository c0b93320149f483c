"""Point cloud container shared by io, geometry, and metrics."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class PointCloud:
    """N points as xyz (N,3) plus per-point intensity (N,) in [0, 1]."""

    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ShapeError(f"xyz must be (N, 3), got {self.xyz.shape}")
        if self.intensity.shape != (self.xyz.shape[0],):
            raise ShapeError(
                f"intensity must be ({self.xyz.shape[0]},), got {self.intensity.shape}"
            )
        if not np.isfinite(self.xyz).all() or not np.isfinite(self.intensity).all():
            raise DataError("point cloud contains non-finite values")

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.xyz, axis=1)

    def as_array(self) -> np.ndarray:
        """(N, 4) float32 view used by the .bin serializer."""
        out = np.empty((len(self), 4), dtype=np.float32)
        out[:, :3] = self.xyz
        out[:, 3] = self.intensity
        return out
