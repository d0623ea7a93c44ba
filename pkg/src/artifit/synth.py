"""Synthetic scans of a posed template with controlled corruption."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, as_points
from .errors import DegenerateMesh, KTooLarge
from .model import (EPS, ModelParams, TemplateModel, matrix_to_rot6d, rodrigues,
                    skin)

VIEWS = ("full", "partial")


@dataclass(frozen=True)
class ScanSpec:
    """How to sample and corrupt a scan.

    ``noise_sigma`` is the per-axis Gaussian noise in meters.  A
    ``"partial"`` view keeps only surface facing the camera, i.e. with
    ``normal . camera_dir <= 0`` where ``camera_dir`` is the viewing
    direction.
    """

    n_points: int = 2048
    noise_sigma: float = 0.0
    outlier_frac: float = 0.0
    outlier_box_scale: float = 1.5
    view: str = "full"
    camera_dir: tuple = (0.0, 0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be at least 1")
        if not 0.0 <= self.outlier_frac < 1.0:
            raise ValueError("outlier_frac must lie in [0, 1)")
        if self.noise_sigma < 0 or self.outlier_box_scale <= 0:
            raise ValueError("noise_sigma must be >= 0 and outlier_box_scale > 0")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}")
        object.__setattr__(self, "camera_dir", tuple(float(c) for c in self.camera_dir))

    @property
    def n_outliers(self) -> int:
        return int(np.floor(self.outlier_frac * self.n_points + 0.5))

    def to_dict(self):
        return {"n_points": self.n_points, "noise_sigma": self.noise_sigma,
                "outlier_frac": self.outlier_frac,
                "outlier_box_scale": self.outlier_box_scale, "view": self.view,
                "camera_dir": list(self.camera_dir), "seed": self.seed}


@dataclass(frozen=True, eq=False)
class SynthScan:
    cloud: PointCloud
    truth_params: ModelParams
    truth_vertices: np.ndarray
    truth_joints: np.ndarray
    outlier_mask: np.ndarray = field(repr=False)
    spec: ScanSpec | None = None


def sample_params(model: TemplateModel, seed: int, pose_scale: float = 0.3,
                  shape_scale: float = 1.0, max_rotation: float | None = None) -> ModelParams:
    """Random parameters for a plausible pose.

    Joint angles are clipped normal draws.  Hinge axes are folded onto
    their natural bending side and axes penalised in both directions are
    held at zero; the root's local rotation stays zero since
    the global rotation covers it.  ``max_rotation=None`` draws the global
    rotation from a random 6-vector, otherwise a random axis with angle
    up to ``max_rotation`` radians is used.
    """
    if pose_scale < 0 or shape_scale < 0:
        raise ValueError("scales must be nonnegative")
    rng = np.random.default_rng(seed)
    beta = rng.normal(0.0, 1.0, model.n_shape) * shape_scale
    theta = np.clip(rng.normal(0.0, 1.0, (model.n_joints, 3)) * pose_scale,
                    -2.0 * pose_scale, 2.0 * pose_scale)
    for j, axis, sign in model.hinge_joints:
        signs = {sg for jj, a, sg in model.hinge_joints if jj == j and a == axis}
        if len(signs) > 1:
            theta[j, axis] = 0.0    # penalised both ways: locked
        else:
            theta[j, axis] = -sign * abs(theta[j, axis])
    theta[model.order[0]] = 0.0
    if max_rotation is None:
        while True:
            b = rng.normal(size=6)
            bx = b[:3] / np.linalg.norm(b[:3])
            if np.linalg.norm(b[:3]) > EPS and np.linalg.norm(np.cross(bx, b[3:])) > EPS:
                break
    else:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        b = matrix_to_rot6d(rodrigues(axis * rng.uniform(0.0, max_rotation)))
    trans = rng.uniform(-0.5, 0.5, 3)
    return ModelParams(beta, theta, b, trans)


def perturb_params(params: ModelParams, seed: int, pose: float = 0.3,
                   trans: float = 0.1) -> ModelParams:
    """A nearby starting point for recovery experiments.

    Every joint angle except the root's moves by up to ``pose`` radians
    and the translation by up to ``trans`` meters in a random direction.
    Shape and global rotation are kept.
    """
    rng = np.random.default_rng(seed)
    theta = params.theta + rng.uniform(-pose, pose, params.theta.shape)
    theta[0] = params.theta[0]
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return params.replace(theta=theta, trans=params.trans + d * rng.uniform(0.0, trans))


def face_normals(vertices, faces):
    """Unit normals and areas of triangles."""
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    unit = np.zeros_like(cross)
    ok = norm > 0
    unit[ok] = cross[ok] / norm[ok, None]
    return unit, 0.5 * norm


def sample_surface(vertices, faces, n: int, rng, view_dir=None):
    """Area-weighted uniform samples on a triangle mesh.

    With ``view_dir`` set, triangles whose normal has a positive component
    along it are culled first.  Returns ``(points, normals)``.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    normals, areas = face_normals(vertices, faces)
    keep = areas > 0
    if view_dir is not None:
        keep &= normals @ np.asarray(view_dir, dtype=np.float64) <= 0
    total = areas[keep].sum()
    if not total > 0:
        raise DegenerateMesh("no visible surface area to sample")
    idx = np.flatnonzero(keep)
    chosen = idx[rng.choice(idx.shape[0], size=n, p=areas[idx] / total)]
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    w0, w1, w2 = 1 - su, su * (1 - v), su * v
    tri = vertices[faces[chosen]]
    pts = w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]
    return pts, normals[chosen]


def farthest_point_indices(points, k: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Greedy farthest-point order; ties go to the lowest index."""
    pts = as_points(points)
    n = pts.shape[0]
    if k > n:
        raise KTooLarge(f"cannot pick {k} points from {n}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    d = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        d = np.minimum(d, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def farthest_point_sample(cloud, k: int, seed: int = 0, start: int | None = None) -> PointCloud:
    idx = farthest_point_indices(cloud, k, seed, start)
    normals = None
    if isinstance(cloud, PointCloud) and cloud.normals is not None:
        normals = cloud.normals[idx]
    return PointCloud(as_points(cloud)[idx], normals)


def generate_scan(model: TemplateModel, params: ModelParams, spec: ScanSpec = ScanSpec()) -> SynthScan:
    """Sample a corrupted scan of the posed model.

    Surface sampling, noise and outlier placement draw from independent
    streams of ``spec.seed``, so changing the noise level leaves the clean
    sample positions untouched.
    """
    verts, joints = skin(model, params)
    s_surface, s_noise, s_outlier = np.random.SeedSequence(spec.seed).spawn(3)
    rng = np.random.default_rng(s_surface)
    view_dir = np.asarray(spec.camera_dir) if spec.view == "partial" else None
    if model.faces is not None and len(model.faces):
        pts, normals = sample_surface(verts, model.faces, spec.n_points, rng, view_dir)
    else:
        if view_dir is not None:
            raise DegenerateMesh("partial views need a model with faces")
        if spec.n_points > verts.shape[0]:
            raise DegenerateMesh(
                f"model without faces has only {verts.shape[0]} vertices to sample")
        idx = farthest_point_indices(verts, spec.n_points, seed=spec.seed)
        pts, normals = verts[idx], None

    if spec.noise_sigma > 0:
        pts = pts + np.random.default_rng(s_noise).normal(0.0, spec.noise_sigma, pts.shape)

    mask = np.zeros(spec.n_points, dtype=bool)
    if spec.n_outliers:
        orng = np.random.default_rng(s_outlier)
        idx = orng.choice(spec.n_points, size=spec.n_outliers, replace=False)
        lo, hi = verts.min(axis=0), verts.max(axis=0)
        center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * spec.outlier_box_scale
        pts = pts.copy()
        pts[idx] = center + orng.uniform(-1.0, 1.0, (idx.size, 3)) * half
        mask[idx] = True
        if normals is not None:
            rand = orng.normal(size=(idx.size, 3))
            normals = normals.copy()
            normals[idx] = rand / np.linalg.norm(rand, axis=1, keepdims=True)
    return SynthScan(PointCloud(pts, normals), params, verts, joints, mask, spec)
