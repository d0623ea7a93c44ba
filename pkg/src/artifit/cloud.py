"""Point cloud container and dense distance helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import sqdist_into
from .errors import DimensionMismatch, EmptyCloud


@dataclass(frozen=True)
class PointCloud:
    """N points in meters, with optional per-point unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionMismatch(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise DimensionMismatch(
                    f"normals shape {nrm.shape} does not match points {pts.shape}")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise EmptyCloud("centroid of an empty cloud")
        return self.points.mean(axis=0)


def as_points(x) -> np.ndarray:
    """Coerce a PointCloud or array-like to a float64 (N, 3) array."""
    if isinstance(x, PointCloud):
        return x.points
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionMismatch(f"expected (N, 3) points, got {arr.shape}")
    return arr


def sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exhaustive squared Euclidean distances, shape (len(a), len(b)).

    Evaluated per coordinate as a sum of squared differences so that the
    result is exactly zero for coincident points (no norm-expansion
    cancellation).
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    sqdist_into(a, b, out)
    return out
