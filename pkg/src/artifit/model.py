"""Articulated body template: shape blendshapes, forward kinematics and
linear blend skinning, plus the 6D global-rotation parameterization.

Vertices are produced as ``R_global @ LBS(rest + shape_basis @ beta, theta) + t``.
Local joint rotations are axis-angle; only the global rotation uses the
6D (two-vector Gram-Schmidt) form.  Every forward function here has a
matching reverse-mode routine so the fitter can get exact gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateRotation, DimensionMismatch

EPS = 1e-9
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

# Below this angle the Rodrigues coefficients switch to Taylor series.
_SMALL_ANGLE = 1e-2


# --------------------------------------------------------------------------
# Rotations
# --------------------------------------------------------------------------

def _normalize(v):
    n = np.linalg.norm(v)
    return v / n, n


def rot6d_to_matrix(b) -> np.ndarray:
    """Map a 6-vector ``(b_x, b_y)`` to a rotation matrix with rows
    ``R_x = N(b_x)``, ``R_z = N(R_x x b_y)``, ``R_y = R_z x R_x``.

    Raises DegenerateRotation when ``|b_x| <= 1e-9`` or ``b_y`` is
    parallel to ``b_x`` within that tolerance.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (6,):
        raise DimensionMismatch(f"6D rotation must have shape (6,), got {b.shape}")
    bx, by = b[:3], b[3:]
    nx = np.linalg.norm(bx)
    if not nx > EPS:
        raise DegenerateRotation(f"|b_x| = {nx:g} is below {EPS:g}")
    rx = bx / nx
    zt = np.cross(rx, by)
    nz = np.linalg.norm(zt)
    if not nz > EPS:
        raise DegenerateRotation("b_y is parallel to b_x")
    rz = zt / nz
    ry = np.cross(rz, rx)
    return np.stack([rx, ry, rz])


def rot6d_vjp(b, g_R) -> np.ndarray:
    """Pull a gradient w.r.t. the rotation matrix back onto the 6-vector."""
    b = np.asarray(b, dtype=np.float64)
    bx, by = b[:3], b[3:]
    rx, nx = _normalize(bx)
    zt = np.cross(rx, by)
    rz, nz = _normalize(zt)
    g_rx = g_R[0].copy()
    g_ry = g_R[1]
    g_rz = g_R[2].copy()
    # ry = rz x rx
    g_rz += np.cross(rx, g_ry)
    g_rx += np.cross(g_ry, rz)
    # rz = N(zt)
    g_zt = (g_rz - rz * (rz @ g_rz)) / nz
    # zt = rx x by
    g_rx += np.cross(by, g_zt)
    g_by = np.cross(g_zt, rx)
    # rx = N(bx)
    g_bx = (g_rx - rx * (rx @ g_rx)) / nx
    return np.concatenate([g_bx, g_by])


def matrix_to_rot6d(R) -> np.ndarray:
    """First two rows of ``R``; the exact preimage under rot6d_to_matrix."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[0], R[1]])


def _skew(v):
    """Batched cross-product matrices, (..., 3) -> (..., 3, 3)."""
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([
        np.stack([z, -w, y], -1),
        np.stack([w, z, -x], -1),
        np.stack([-y, x, z], -1),
    ], -2)


def _vee_antisym(G):
    """w with <G, skew(e_i)> = w_i, for batched (..., 3, 3) G."""
    return np.stack([
        G[..., 2, 1] - G[..., 1, 2],
        G[..., 0, 2] - G[..., 2, 0],
        G[..., 1, 0] - G[..., 0, 1],
    ], -1)


def _rodrigues_coeffs(x):
    """a = sin x / x, b = (1 - cos x) / x^2 and their derivatives over x."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    small = x < _SMALL_ANGLE
    xs = np.where(small, 1.0, x)
    s, c = np.sin(xs), np.cos(xs)
    a = np.where(small, 1 - x2 / 6 + x2 * x2 / 120, s / xs)
    b = np.where(small, 0.5 - x2 / 24 + x2 * x2 / 720, (1 - c) / xs**2)
    da = np.where(small, -1 / 3 + x2 / 30 - x2 * x2 / 840,
                  (xs * c - s) / xs**3)
    db = np.where(small, -1 / 12 + x2 / 180 - x2 * x2 / 6720,
                  (xs * s - 2 * (1 - c)) / xs**4)
    return a, b, da, db


def rodrigues(theta) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    theta = np.asarray(theta, dtype=np.float64)
    a, b, _, _ = _rodrigues_coeffs(np.linalg.norm(theta, axis=-1))
    K = _skew(theta)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_vjp(theta, g_R) -> np.ndarray:
    """Gradient w.r.t. axis-angle vectors given gradients w.r.t. matrices."""
    theta = np.asarray(theta, dtype=np.float64)
    a, b, da, db = _rodrigues_coeffs(np.linalg.norm(theta, axis=-1))
    K = _skew(theta)
    Kt = np.swapaxes(K, -1, -2)
    term_a = _vee_antisym(g_R)
    M = g_R @ Kt + Kt @ g_R
    term_b = _vee_antisym(M)
    gK = np.sum(g_R * K, axis=(-1, -2))
    gKK = np.sum(g_R * (K @ K), axis=(-1, -2))
    radial = da * gK + db * gKK
    return (a[..., None] * term_a + b[..., None] * term_b
            + radial[..., None] * theta)


# --------------------------------------------------------------------------
# Model and parameters
# --------------------------------------------------------------------------

def _frozen(x, dtype=np.float64):
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TemplateModel:
    """Linear-blend-skinned body template.

    Shapes: rest_vertices (M, 3); shape_basis (M, 3, S); joint_regressor
    (J, M); parents (J,) with -1 for the root; skin_weights (M, J).
    ``hinge_joints`` lists ``(joint, axis, sign)`` triples for the
    bending-direction prior.  ``faces`` is optional and only used for
    surface sampling and mesh export.
    """

    rest_vertices: np.ndarray
    shape_basis: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    skin_weights: np.ndarray
    hinge_joints: tuple = ()
    faces: np.ndarray | None = None
    joint_names: tuple | None = None

    def __post_init__(self):
        rest = _frozen(self.rest_vertices)
        if rest.ndim != 2 or rest.shape[1] != 3:
            raise DimensionMismatch(f"rest_vertices must be (M, 3), got {rest.shape}")
        M = rest.shape[0]
        basis = _frozen(self.shape_basis)
        if basis.ndim == 2 and basis.shape == (M, 3):
            basis = _frozen(basis[:, :, None])
        if basis.ndim != 3 or basis.shape[:2] != (M, 3):
            raise DimensionMismatch(f"shape_basis must be (M, 3, S), got {basis.shape}")
        parents = _frozen(self.parents, dtype=np.int64)
        J = parents.shape[0]
        reg = _frozen(self.joint_regressor)
        if reg.shape != (J, M):
            raise DimensionMismatch(f"joint_regressor must be ({J}, {M}), got {reg.shape}")
        weights = _frozen(self.skin_weights)
        if weights.shape != (M, J):
            raise DimensionMismatch(f"skin_weights must be ({M}, {J}), got {weights.shape}")
        if np.any(weights < 0) or np.any(np.abs(weights.sum(1) - 1) > 1e-9):
            raise ValueError("skin_weights rows must be nonnegative and sum to 1")
        if np.any(np.abs(reg.sum(1) - 1) > 1e-9):
            raise ValueError("joint_regressor rows must sum to 1")
        hinges = tuple((int(j), int(ax), int(s)) for j, ax, s in self.hinge_joints)
        for j, ax, s in hinges:
            if not (0 <= j < J and 0 <= ax < 3 and s in (-1, 1)):
                raise ValueError(f"invalid hinge joint entry {(j, ax, s)}")
        object.__setattr__(self, "rest_vertices", rest)
        object.__setattr__(self, "shape_basis", basis)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "joint_regressor", reg)
        object.__setattr__(self, "skin_weights", weights)
        object.__setattr__(self, "hinge_joints", hinges)
        if self.faces is not None:
            faces = _frozen(self.faces, dtype=np.int64)
            if faces.ndim != 2 or faces.shape[1] != 3 or (
                    faces.size and (faces.min() < 0 or faces.max() >= M)):
                raise ValueError("faces must be (F, 3) indices into rest_vertices")
            object.__setattr__(self, "faces", faces)
        if self.joint_names is not None:
            if len(self.joint_names) != J:
                raise DimensionMismatch("joint_names length must equal joint count")
            object.__setattr__(self, "joint_names", tuple(self.joint_names))
        self.order  # validates the tree

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @cached_property
    def order(self) -> tuple:
        """Joint indices with every parent before its children."""
        parents = self.parents
        roots = [j for j in range(len(parents)) if parents[j] < 0]
        if len(roots) != 1:
            raise ValueError(f"kinematic tree needs exactly one root, found {len(roots)}")
        children = [[] for _ in parents]
        for j, p in enumerate(parents):
            if p >= 0:
                if p >= len(parents):
                    raise ValueError(f"parent index {p} out of range")
                children[p].append(j)
        order, stack = [], [roots[0]]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != len(parents):
            raise ValueError("kinematic tree is cyclic or disconnected")
        return tuple(order)

    def zero_params(self) -> "ModelParams":
        return ModelParams(np.zeros(self.n_shape), np.zeros((self.n_joints, 3)),
                           IDENTITY_6D.copy(), np.zeros(3))

    def rest_joints(self, beta=None) -> np.ndarray:
        shaped = self.rest_vertices
        if beta is not None:
            shaped = shaped + self.shape_basis @ np.asarray(beta, dtype=np.float64)
        return self.joint_regressor @ shaped


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Shape ``beta`` (S,), local axis-angle ``theta`` (J, 3), global 6D
    rotation ``rot6d`` (6,) and translation ``trans`` (3,)."""

    beta: np.ndarray
    theta: np.ndarray
    rot6d: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        theta = np.array(self.theta, dtype=np.float64).reshape(-1, 3)
        rot6d = np.array(self.rot6d, dtype=np.float64).reshape(-1)
        trans = np.array(self.trans, dtype=np.float64).reshape(-1)
        if rot6d.shape != (6,) or trans.shape != (3,):
            raise DimensionMismatch("rot6d must have 6 entries and trans 3")
        for name, arr in (("beta", beta), ("theta", theta),
                          ("rot6d", rot6d), ("trans", trans)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.theta.reshape(-1), self.rot6d, self.trans])

    @classmethod
    def from_vector(cls, vec, n_shape: int, n_joints: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (n_shape + 3 * n_joints + 9,):
            raise DimensionMismatch(f"parameter vector has wrong length {vec.shape}")
        i = n_shape + 3 * n_joints
        return cls(vec[:n_shape], vec[n_shape:i].reshape(n_joints, 3),
                   vec[i:i + 6], vec[i + 6:])

    def replace(self, **changes) -> "ModelParams":
        fields = dict(beta=self.beta, theta=self.theta, rot6d=self.rot6d, trans=self.trans)
        fields.update(changes)
        return ModelParams(**fields)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "theta": self.theta.tolist(),
                "rot6d": self.rot6d.tolist(), "trans": self.trans.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ModelParams":
        return cls(d["beta"], d["theta"], d["rot6d"], d["trans"])

    def allclose(self, other: "ModelParams", atol=0.0) -> bool:
        return bool(np.allclose(self.to_vector(), other.to_vector(), rtol=0, atol=atol))


def check_dims(model: TemplateModel, params: ModelParams):
    if params.beta.shape != (model.n_shape,):
        raise DimensionMismatch(
            f"beta has {params.beta.shape[0]} coefficients, model expects {model.n_shape}")
    if params.theta.shape != (model.n_joints, 3):
        raise DimensionMismatch(
            f"theta has {params.theta.shape[0]} joints, model expects {model.n_joints}")


# --------------------------------------------------------------------------
# Skinning
# --------------------------------------------------------------------------

class SkinResult:
    """Posed vertices and joints, plus what the reverse pass needs."""

    def __init__(self, model, params, shaped, joints_rest, local_R, A, a,
                 T, posed, R_global, vertices, joints):
        self.model = model
        self.params = params
        self._shaped = shaped
        self._joints_rest = joints_rest
        self._local_R = local_R
        self._A = A
        self._a = a
        self._T = T
        self._posed = posed
        self._R_global = R_global
        self.vertices = vertices
        self.joints = joints

    def backward(self, g_vertices, g_joints=None) -> ModelParams:
        """Gradient w.r.t. every parameter block, returned as a ModelParams."""
        model = self.model
        W = model.skin_weights
        Rg = self._R_global
        A, a, Jr = self._A, self._a, self._joints_rest
        g_vertices = np.asarray(g_vertices, dtype=np.float64)

        g_t = g_vertices.sum(0)
        g_Rg = g_vertices.T @ self._posed
        g_posed = g_vertices @ Rg
        g_a = np.zeros_like(a)
        if g_joints is not None:
            g_joints = np.asarray(g_joints, dtype=np.float64)
            g_t = g_t + g_joints.sum(0)
            g_Rg = g_Rg + g_joints.T @ a
            g_a += g_joints @ Rg

        # posed_m = T_m shaped_m + sum_j w_mj (a_j - A_j J_j), T_m = sum_j w_mj A_j
        g_T = g_posed[:, :, None] * self._shaped[:, None, :]
        g_A = (W.T @ g_T.reshape(-1, 9)).reshape(-1, 3, 3)
        g_off = W.T @ g_posed
        g_shaped = np.einsum("mab,ma->mb", self._T, g_posed)
        g_a += g_off
        g_A -= g_off[:, :, None] * Jr[:, None, :]
        g_J = -np.einsum("jab,ja->jb", A, g_off)

        parents = model.parents
        g_R = np.empty_like(A)
        for j in reversed(model.order):
            p = parents[j]
            if p < 0:
                g_R[j] = g_A[j]
                g_J[j] += g_a[j]
                continue
            g_A[p] += g_A[j] @ self._local_R[j].T + np.outer(g_a[j], Jr[j] - Jr[p])
            g_R[j] = A[p].T @ g_A[j]
            tmp = A[p].T @ g_a[j]
            g_J[j] += tmp
            g_J[p] -= tmp
            g_a[p] += g_a[j]

        g_theta = rodrigues_vjp(self.params.theta, g_R)
        g_shaped += model.joint_regressor.T @ g_J
        g_beta = np.einsum("mks,mk->s", model.shape_basis, g_shaped)
        g_b = rot6d_vjp(self.params.rot6d, g_Rg)
        return ModelParams(g_beta, g_theta, g_b, g_t)


def forward(model: TemplateModel, params: ModelParams) -> SkinResult:
    check_dims(model, params)
    R_global = rot6d_to_matrix(params.rot6d)
    shaped = model.rest_vertices + model.shape_basis @ params.beta
    Jr = model.joint_regressor @ shaped
    local_R = rodrigues(params.theta)
    n = model.n_joints
    A = np.empty((n, 3, 3))
    a = np.empty((n, 3))
    # t_j = a_j - A_j J_j, accumulated so that it is exactly 0 at rest
    t = np.empty((n, 3))
    parents = model.parents
    for j in model.order:
        p = parents[j]
        if p < 0:
            A[j] = local_R[j]
            a[j] = Jr[j]
            t[j] = (np.eye(3) - A[j]) @ Jr[j]
        else:
            A[j] = A[p] @ local_R[j]
            a[j] = A[p] @ (Jr[j] - Jr[p]) + a[p]
            t[j] = (A[p] - A[j]) @ Jr[j] + t[p]
    W = model.skin_weights
    # blended transforms as identity plus a delta, so the rest pose is exact
    D = (W @ (A - np.eye(3)).reshape(n, 9)).reshape(-1, 3, 3)
    posed = shaped + np.einsum("mab,mb->ma", D, shaped) + W @ t
    T = D + np.eye(3)
    vertices = posed @ R_global.T + params.trans
    joints = a @ R_global.T + params.trans
    return SkinResult(model, params, shaped, Jr, local_R, A, a, T, posed,
                      R_global, vertices, joints)


def skin(model: TemplateModel, params: ModelParams):
    """Return ``(vertices (M, 3), joints (J, 3))`` for the given parameters.

    Joints are regressed from the shaped template and carried through the
    kinematic chain, then receive the same global rigid transform as the
    vertices.
    """
    res = forward(model, params)
    return res.vertices, res.joints


# --------------------------------------------------------------------------
# Toy humanoid
# --------------------------------------------------------------------------

TOY_JOINT_NAMES = (
    "pelvis", "spine", "chest", "neck", "head",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
_TOY_PARENTS = (-1, 0, 1, 2, 3, 0, 5, 6, 0, 8, 9, 2, 11, 12, 2, 14, 15)
# Offsets from the parent joint, T-pose, y up, facing +z.
_TOY_OFFSETS = (
    (0.0, 0.95, 0.0), (0.0, 0.12, 0.0), (0.0, 0.20, 0.0), (0.0, 0.20, 0.0),
    (0.0, 0.08, 0.0),
    (0.10, -0.05, 0.0), (0.0, -0.42, 0.0), (0.0, -0.41, 0.0),
    (-0.10, -0.05, 0.0), (0.0, -0.42, 0.0), (0.0, -0.41, 0.0),
    (0.19, 0.15, 0.0), (0.28, 0.0, 0.0), (0.25, 0.0, 0.0),
    (-0.19, 0.15, 0.0), (-0.28, 0.0, 0.0), (-0.25, 0.0, 0.0),
)
# Segment end for joints without a primary child.
_TOY_TIPS = {4: (0.0, 0.22, 0.0), 7: (0.0, -0.05, 0.14), 10: (0.0, -0.05, 0.14),
             13: (0.16, 0.0, 0.0), 16: (-0.16, 0.0, 0.0)}
_TOY_PRIMARY_CHILD = {0: 1, 1: 2, 2: 3, 3: 4, 5: 6, 6: 7, 8: 9, 9: 10,
                      11: 12, 12: 13, 14: 15, 15: 16}
_TOY_RADII = (0.13, 0.12, 0.14, 0.05, 0.09, 0.07, 0.05, 0.04, 0.07, 0.05, 0.04,
              0.045, 0.04, 0.035, 0.045, 0.04, 0.035)
# Mirror pairs share their random proportions.
_TOY_SYMMETRIC = {8: 5, 9: 6, 10: 7, 14: 11, 15: 12, 16: 13}
# Knees bend about x and elbows about y; a pair of opposite signs on the
# other axes penalises off-hinge rotation in both directions.
_TOY_HINGES = tuple(
    (j, a, sg)
    for j, axis, sign in ((6, 0, -1), (9, 0, -1), (12, 1, 1), (15, 1, -1))
    for a, sg in ((axis, sign),) + tuple((o, t) for o in range(3) if o != axis for t in (1, -1)))
_BLEND_SPAN = 0.25
_HEIGHT_RATE = 0.06
_GIRTH_RATE = 0.10
_ELLIPSE = 1.6


def _perp_frame(d):
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _toy_segments(joints, tips, radii):
    """(owner joint, start, end, radius, blends_with_parent) tuples."""
    segs = []
    for j in range(len(joints)):
        if j in _TOY_PRIMARY_CHILD:
            end = joints[_TOY_PRIMARY_CHILD[j]]
        else:
            end = joints[j] + tips[j]
        segs.append((j, joints[j], end, radii[j], _TOY_PARENTS[j] >= 0))
    # Rigid crossbars keeping the hips and shoulders attached to the trunk.
    segs.append((0, joints[5], joints[8], 0.09, False))
    segs.append((2, joints[11], joints[14], 0.06, False))
    return segs



def _ring_layout(segs, spacing):
    """(tube rings, sectors, rings per cap) for each segment."""
    layout = []
    for _, start, end, radius, _ in segs:
        length = np.linalg.norm(end - start)
        sectors = max(3, int(round(2 * np.pi * radius / spacing)))
        rings = max(2, int(round(length / spacing)) + 1)
        cap = max(1, int(round(0.5 * np.pi * radius / spacing)))
        layout.append((rings, sectors, cap))
    return layout


def _layout_count(layout):
    return sum((r + 2 * (c - 1)) * s + 2 for r, s, c in layout)


def make_toy_humanoid(seed: int = 0, vertex_count: int = 800) -> TemplateModel:
    """Deterministic capsule-limb humanoid with 17 joints and two shape
    coefficients (height, girth).

    Each segment is an elliptical tube closed by hemispherical caps.
    ``seed`` jitters limb lengths and radii; ``vertex_count`` is a budget,
    met from below by choosing a uniform ring spacing.  Budgets smaller
    than the coarsest layout (3 sectors, 2 rings, bare apex caps) yield the
    coarsest layout.
    """
    if vertex_count < 50:
        raise ValueError("vertex_count must be at least 50")
    rng = np.random.default_rng(seed)
    n = len(_TOY_PARENTS)
    length_scale = rng.uniform(0.93, 1.07, size=n)
    radius_scale = rng.uniform(0.88, 1.12, size=n)
    for j, src in _TOY_SYMMETRIC.items():
        length_scale[j] = length_scale[src]
        radius_scale[j] = radius_scale[src]
    length_scale[0] = 1.0

    joints = np.zeros((n, 3))
    for j in range(n):
        off = np.array(_TOY_OFFSETS[j]) * length_scale[j]
        joints[j] = off if _TOY_PARENTS[j] < 0 else joints[_TOY_PARENTS[j]] + off
    tips = {j: np.array(tip) * length_scale[j] for j, tip in _TOY_TIPS.items()}
    radii = np.array(_TOY_RADII) * radius_scale
    segs = _toy_segments(joints, tips, radii)

    lo, hi = 1e-3, 1.0
    if _layout_count(_ring_layout(segs, hi)) >= vertex_count:
        spacing = hi
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _layout_count(_ring_layout(segs, mid)) > vertex_count:
                lo = mid
            else:
                hi = mid
        spacing = hi
    layout = _ring_layout(segs, spacing)

    verts, girth, faces = [], [], []
    weights = []
    reg_rows = {}

    def add(point, offset, w):
        verts.append(point)
        girth.append(_GIRTH_RATE * offset)
        weights.append(w)
        return len(verts) - 1

    def band(lo, hi, sectors):
        for k in range(sectors):
            k1 = (k + 1) % sectors
            faces.append((lo + k, lo + k1, hi + k1))
            faces.append((lo + k, hi + k1, hi + k))

    def fan(apex, ring, sectors, flip):
        for k in range(sectors):
            k1 = (k + 1) % sectors
            faces.append((apex, ring + k, ring + k1) if flip else (apex, ring + k1, ring + k))

    for (owner, start, end, radius, blends), (rings, sectors, cap) in zip(segs, layout):
        axis = end - start
        d = axis / np.linalg.norm(axis)
        u, w = _perp_frame(d)
        parent = _TOY_PARENTS[owner]
        rigid = {owner: 1.0}
        half = {owner: 0.5, parent: 0.5} if blends else rigid
        angles = 2 * np.pi * np.arange(sectors) / sectors
        # elliptical sections keep the twist about each bone observable
        radial = (np.cos(angles)[:, None] * _ELLIPSE * u
                  + np.sin(angles)[:, None] / _ELLIPSE * w)

        # hemispherical cap behind the start joint, apex first
        start_apex = add(start - radius * d, -radius * d, half)
        prev = None
        for i in range(cap - 1, 0, -1):
            phi = 0.5 * np.pi * i / cap
            ring = len(verts)
            for rad in radial:
                off = radius * (np.cos(phi) * rad - np.sin(phi) * d)
                add(start + off, off, half)
            if prev is None:
                fan(start_apex, ring, sectors, flip=False)
            else:
                band(prev, ring, sectors)
            prev = ring

        base = len(verts)
        for r in range(rings):
            s = r / (rings - 1)
            center = start + s * axis
            if blends and s < _BLEND_SPAN:
                wj = 0.5 + 0.5 * s / _BLEND_SPAN
                wd = {owner: wj, parent: 1.0 - wj}
            else:
                wd = rigid
            for rad in radial:
                add(center + radius * rad, radius * rad, wd)
            if r == 0 and owner not in reg_rows:
                # ring centred on the joint: its mean is the joint position
                reg_rows[owner] = list(range(base, base + sectors))
        if prev is None:
            fan(start_apex, base, sectors, flip=False)
        else:
            band(prev, base, sectors)
        for r in range(rings - 1):
            band(base + r * sectors, base + (r + 1) * sectors, sectors)

        # cap beyond the end of the segment
        prev = base + (rings - 1) * sectors
        for i in range(1, cap):
            phi = 0.5 * np.pi * i / cap
            ring = len(verts)
            for rad in radial:
                off = radius * (np.cos(phi) * rad + np.sin(phi) * d)
                add(end + off, off, rigid)
            band(prev, ring, sectors)
            prev = ring
        end_apex = add(end + radius * d, radius * d, rigid)
        fan(end_apex, prev, sectors, flip=True)

    verts = np.array(verts)
    M = len(verts)
    skin_w = np.zeros((M, n))
    for m, wd in enumerate(weights):
        for j, val in wd.items():
            skin_w[m, j] += val
    reg = np.zeros((n, M))
    for j, rows in reg_rows.items():
        reg[j, rows] = 1.0 / len(rows)
    shape_basis = np.stack([_HEIGHT_RATE * verts, np.array(girth)], axis=2)
    return TemplateModel(verts, shape_basis, reg, np.array(_TOY_PARENTS), skin_w,
                         _TOY_HINGES, np.array(faces, dtype=np.int64), TOY_JOINT_NAMES)
