import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from artifit.errors import DegenerateRotation, DimensionMismatch
from artifit.model import (EPS, IDENTITY_6D, ModelParams, TemplateModel, forward,
                           make_toy_humanoid, matrix_to_rot6d, rodrigues, rot6d_to_matrix,
                           skin)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def _valid_6d(b):
    bx = b[:3]
    return np.linalg.norm(bx) > 1e-3 and np.linalg.norm(np.cross(bx / np.linalg.norm(bx), b[3:])) > 1e-3


def gram_schmidt_oracle(b):
    """Rows built directly from the two input vectors, no shared code."""
    x = np.array(b[:3], dtype=float)
    x = x / np.sqrt(x @ x)
    z = np.cross(x, np.array(b[3:], dtype=float))
    z = z / np.sqrt(z @ z)
    y = np.cross(z, x)
    return np.array([x, y, z])


# -- 6D rotations ----------------------------------------------------------

def test_identity_6d():
    assert np.array_equal(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))


def test_scaled_identity_6d():
    assert np.allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3), atol=1e-15)


def test_quarter_turn_6d_rows():
    R = rot6d_to_matrix([0, 1, 0, -1, 0, 0])
    expected = [[0, 1, 0], [-1, 0, 0], [0, 0, 1]]
    assert np.allclose(gram_schmidt_oracle([0, 1, 0, -1, 0, 0]), expected)
    assert np.allclose(R, expected, atol=1e-15)


@pytest.mark.parametrize("b", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1e-12, 0, 0, 0, 1, 0]])
def test_degenerate_6d_raises(b):
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix(b)


@given(arrays(np.float64, 6, elements=finite).filter(_valid_6d))
def test_rot6d_orthonormal(b):
    R = rot6d_to_matrix(b)
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@given(arrays(np.float64, 6, elements=finite).filter(_valid_6d),
       st.floats(1e-3, 1e3))
def test_rot6d_scale_invariant(b, s):
    scaled = np.concatenate([b[:3] * s, b[3:]])
    assert np.max(np.abs(rot6d_to_matrix(scaled) - rot6d_to_matrix(b))) <= 1e-12


@given(arrays(np.float64, 6, elements=finite).filter(_valid_6d))
def test_rot6d_matches_oracle(b):
    assert np.allclose(rot6d_to_matrix(b), gram_schmidt_oracle(b), atol=1e-9)


@given(arrays(np.float64, 6, elements=finite).filter(_valid_6d))
def test_matrix_to_rot6d_round_trip(b):
    R = rot6d_to_matrix(b)
    assert np.allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


@given(arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_rodrigues_is_rotation_about_axis(v):
    R = rodrigues(v)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.allclose(R @ v, v, atol=1e-12)


def test_rodrigues_quarter_turn_z():
    assert np.allclose(rodrigues([0, 0, np.pi / 2]), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


# -- toy model -------------------------------------------------------------

def test_toy_invariants():
    m = make_toy_humanoid(0, 400)
    assert m.n_joints >= 16 and m.n_shape == 2
    assert m.n_vertices <= 400
    assert np.all(m.skin_weights >= 0)
    assert np.allclose(m.skin_weights.sum(1), 1, atol=1e-9)
    assert np.allclose(m.joint_regressor.sum(1), 1, atol=1e-9)
    assert (m.parents == -1).sum() == 1
    assert len(m.order) == m.n_joints


def test_toy_deterministic():
    a, b = make_toy_humanoid(3, 500), make_toy_humanoid(3, 500)
    for f in ("rest_vertices", "shape_basis", "joint_regressor", "skin_weights", "faces"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_toy_seed_changes_rest_vertices():
    a, b = make_toy_humanoid(0, 400), make_toy_humanoid(1, 400)
    assert a.rest_vertices.shape != b.rest_vertices.shape or \
        not np.array_equal(a.rest_vertices, b.rest_vertices)


def test_toy_budget_is_respected_and_used():
    for budget in (50, 200, 1000, 3000):
        m = make_toy_humanoid(0, budget)
        assert m.n_vertices <= max(budget, make_toy_humanoid(0, 50).n_vertices)
    assert make_toy_humanoid(0, 3000).n_vertices > 0.8 * 3000


def test_toy_rejects_tiny_budget():
    with pytest.raises(ValueError):
        make_toy_humanoid(0, 49)


def test_toy_mesh_is_closed():
    m = make_toy_humanoid(0, 400)
    edges = {}
    for f in m.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges[(a, b)] = edges.get((a, b), 0) + 1
    # every directed edge appears once and is matched by its reverse
    assert all(c == 1 for c in edges.values())
    assert all((b, a) in edges for a, b in edges)


def test_invalid_template_rejected():
    m = make_toy_humanoid(0, 100)
    bad = m.skin_weights.copy()
    bad[0] *= 2
    with pytest.raises(ValueError):
        TemplateModel(m.rest_vertices, m.shape_basis, m.joint_regressor, m.parents, bad)
    cyclic = m.parents.copy()
    cyclic[1] = 2
    with pytest.raises(ValueError):
        TemplateModel(m.rest_vertices, m.shape_basis, m.joint_regressor, cyclic, m.skin_weights)


# -- skinning --------------------------------------------------------------

def test_rest_pose_is_exact(toy):
    v, _ = skin(toy, toy.zero_params())
    assert np.array_equal(v, toy.rest_vertices)


def test_pure_translation(toy):
    v, _ = skin(toy, toy.zero_params().replace(trans=[0, 0, 1]))
    assert np.allclose(v, toy.rest_vertices + [0, 0, 1], atol=1e-15)


def test_elbow_bend_rotates_forearm_about_elbow(toy):
    elbow = toy.joint_names.index("l_elbow")
    theta = np.zeros((toy.n_joints, 3))
    theta[elbow] = (0, 0, np.pi / 2)
    v, _ = skin(toy, toy.zero_params().replace(theta=theta))
    pivot = toy.rest_joints()[elbow]
    Rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]])
    # descendants of the elbow, rigidly bound
    desc = {elbow}
    for j in toy.order:
        if toy.parents[j] in desc:
            desc.add(j)
    rigid = np.isclose(toy.skin_weights[:, sorted(desc)].sum(1), 1.0)
    assert rigid.sum() > 10
    expected = (toy.rest_vertices[rigid] - pivot) @ Rz.T + pivot
    assert np.max(np.abs(v[rigid] - expected)) < 1e-6
    untouched = toy.skin_weights[:, sorted(desc)].sum(1) == 0
    assert np.array_equal(v[untouched], toy.rest_vertices[untouched])


def test_dimension_mismatch(toy):
    with pytest.raises(DimensionMismatch):
        skin(toy, ModelParams(np.zeros(3), np.zeros((toy.n_joints, 3))))
    with pytest.raises(DimensionMismatch):
        skin(toy, ModelParams(np.zeros(2), np.zeros((toy.n_joints - 1, 3))))


def test_params_reject_non_finite():
    with pytest.raises(ValueError):
        ModelParams([np.nan, 0], np.zeros((2, 3)))


def test_params_vector_round_trip(rng):
    p = ModelParams(rng.normal(size=2), rng.normal(size=(17, 3)), rng.normal(size=6),
                    rng.normal(size=3))
    q = ModelParams.from_vector(p.to_vector(), 2, 17)
    assert np.array_equal(p.to_vector(), q.to_vector())
    assert ModelParams.from_dict(p.to_dict()).allclose(p)


@st.composite
def poses(draw, n_joints=17):
    theta = draw(arrays(np.float64, (n_joints, 3), elements=st.floats(-1, 1)))
    beta = draw(arrays(np.float64, 2, elements=st.floats(-2, 2)))
    b = draw(arrays(np.float64, 6, elements=st.floats(-2, 2)).filter(_valid_6d))
    t = draw(arrays(np.float64, 3, elements=st.floats(-2, 2)))
    return ModelParams(beta, theta, b, t)


@given(poses(), arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_translation_moves_every_vertex(params, delta):
    m = make_toy_humanoid(0, 120)
    v0, j0 = skin(m, params)
    v1, j1 = skin(m, params.replace(trans=params.trans + delta))
    assert np.allclose(v1 - v0, delta, atol=1e-12)
    assert np.allclose(j1 - j0, delta, atol=1e-12)


@given(poses())
def test_zero_pose_is_rigid_transform_of_rest(params):
    m = make_toy_humanoid(0, 120)
    p = params.replace(theta=np.zeros_like(params.theta), beta=np.zeros(2))
    v, _ = skin(m, p)
    R = rot6d_to_matrix(p.rot6d)
    assert np.allclose(v, m.rest_vertices @ R.T + p.trans, atol=1e-12)


@given(st.integers(1, 16), arrays(np.float64, 3, elements=st.floats(-2, 2)))
def test_descendants_keep_distance_to_rotated_joint(j, axis_angle):
    m = make_toy_humanoid(0, 120)
    theta = np.zeros((m.n_joints, 3))
    theta[j] = axis_angle
    _, rest = skin(m, m.zero_params())
    _, posed = skin(m, m.zero_params().replace(theta=theta))
    desc = {j}
    for k in m.order:
        if m.parents[k] in desc:
            desc.add(k)
    for k in desc - {j}:
        assert abs(np.linalg.norm(posed[k] - posed[j]) - np.linalg.norm(rest[k] - rest[j])) < 1e-9
    # everything outside the subtree stays put
    for k in set(range(m.n_joints)) - desc:
        assert np.allclose(posed[k], rest[k], atol=1e-12)


def test_forward_is_deterministic(toy, rng):
    p = ModelParams(rng.normal(size=2), rng.normal(size=(17, 3)) * 0.3, IDENTITY_6D, np.zeros(3))
    assert np.array_equal(forward(toy, p).vertices, forward(toy, p).vertices)


def test_eps_threshold():
    assert EPS == 1e-9
