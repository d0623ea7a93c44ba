"""Evaluation metrics.  Inputs are in meters; every distance metric is
reported in millimeters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import as_points
from .errors import EmptyCloud, LengthMismatch, MissingCorrespondence
from .mixture import PosteriorMatrix

MM = 1000.0
OUTLIER = -1


def _paired(a, b):
    a, b = as_points(a), as_points(b)
    if a.shape != b.shape:
        raise LengthMismatch(f"cannot pair {a.shape[0]} points with {b.shape[0]}")
    return a, b


def v2v(pred_vertices, truth_vertices) -> float:
    """Mean per-vertex Euclidean error between meshes sharing topology."""
    a, b = _paired(pred_vertices, truth_vertices)
    if a.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(a - b, axis=1).mean() * MM)


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance: the average of the two mean
    nearest-neighbour distances (not squared)."""
    a, b = as_points(a), as_points(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    ab, _ = cKDTree(b).query(a)
    ba, _ = cKDTree(a).query(b)
    return float(0.5 * (ab.mean() + ba.mean()) * MM)


def mpjpe(pred_joints, truth_joints) -> float:
    a, b = _paired(pred_joints, truth_joints)
    return float(np.linalg.norm(a - b, axis=1).mean() * MM)


def pck(pred_joints, truth_joints, threshold_mm: float = 100.0) -> float:
    """Percent of joints closer than ``threshold_mm`` to the truth."""
    a, b = _paired(pred_joints, truth_joints)
    if a.shape[0] == 0:
        return 100.0
    dist = np.linalg.norm(a - b, axis=1) * MM
    return float(100.0 * np.mean(dist < threshold_mm))


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """Per cloud point: matched template vertex, or ``OUTLIER`` (-1)."""

    index: np.ndarray
    confidence: np.ndarray

    @property
    def is_outlier(self) -> np.ndarray:
        return self.index == OUTLIER

    def to_dict(self):
        return {"index": self.index.tolist(), "confidence": self.confidence.tolist()}


def extract_correspondences(post: PosteriorMatrix) -> CorrespondenceMap:
    """Arg-max template vertex per row; rows whose outlier mass exceeds
    their inlier mass are labelled ``OUTLIER``."""
    resp = post.resp
    idx = np.argmax(resp, axis=1)
    conf = resp[np.arange(resp.shape[0]), idx] if resp.shape[1] else np.zeros(0)
    outlier = post.outlier_mass > resp.sum(axis=1)
    return CorrespondenceMap(np.where(outlier, OUTLIER, idx).astype(np.int64), conf)


@dataclass(frozen=True)
class CorrespondenceError:
    mean_mm: float
    n_used: int
    n_missing: int


def correspondence_error(map_a: CorrespondenceMap, map_b: CorrespondenceMap,
                         points_b, pairs, template_vertices) -> CorrespondenceError:
    """Route scan-A points to scan B through a shared template.

    Each ``(i, j)`` in ``pairs`` says point i of scan A truly corresponds
    to point j of scan B.  Point i goes to template vertex
    ``map_a.index[i]``; from there the predicted B point is the inlier B
    point whose own template vertex lies closest to it (ties go to the
    lowest index).  The error is the distance from the predicted to the
    true B point.  Pairs whose A point is an outlier are skipped and
    counted; MissingCorrespondence is raised when nothing is left.
    """
    pts_b = as_points(points_b)
    tmpl = as_points(template_vertices)
    if map_b.index.shape[0] != pts_b.shape[0]:
        raise LengthMismatch("map_b must have one entry per scan-B point")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    inliers_b = np.flatnonzero(~map_b.is_outlier)
    if inliers_b.size == 0:
        raise MissingCorrespondence("scan B has no inlier correspondences")
    anchor_b = tmpl[map_b.index[inliers_b]]
    errors, missing = [], 0
    for i, j in pairs:
        m = map_a.index[i]
        if m == OUTLIER:
            missing += 1
            continue
        d = np.sum((anchor_b - tmpl[m]) ** 2, axis=1)
        pred = inliers_b[int(np.argmin(d))]
        errors.append(np.linalg.norm(pts_b[pred] - pts_b[j]))
    if not errors:
        raise MissingCorrespondence(f"all {missing} routed points are outliers")
    return CorrespondenceError(float(np.mean(errors) * MM), len(errors), missing)
