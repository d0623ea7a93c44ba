import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from artifit.errors import EmptyCloud, LengthMismatch, MissingCorrespondence
from artifit.metrics import (OUTLIER, CorrespondenceMap, chamfer, correspondence_error,
                             extract_correspondences, mpjpe, pck, v2v)
from artifit.mixture import MixtureConfig, MixtureState, PosteriorMatrix, posterior
from artifit.model import rodrigues

coords = st.floats(-3, 3, allow_nan=False)


def identity_map(n):
    return CorrespondenceMap(np.arange(n), np.ones(n))


# -- V2V, MPJPE, PCK -------------------------------------------------------

def test_v2v_uniform_offset():
    a = np.random.default_rng(0).normal(size=(50, 3))
    assert v2v(a + [0.010, 0, 0], a) == pytest.approx(10.0, abs=1e-9)


def test_v2v_brute_force(rng):
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    ref = sum(np.sqrt(sum((a[i, k] - b[i, k]) ** 2 for k in range(3))) for i in range(40)) / 40
    assert abs(v2v(a, b) - 1000 * ref) <= 1e-9


def test_v2v_length_mismatch():
    with pytest.raises(LengthMismatch):
        v2v(np.zeros((3, 3)), np.zeros((4, 3)))


def test_exact_joints():
    j = np.random.default_rng(1).normal(size=(17, 3))
    assert mpjpe(j, j) == 0.0 and pck(j, j) == 100.0


def test_pck_offsets():
    j = np.zeros((10, 3))
    assert pck(j + [0.150, 0, 0], j) == 0.0
    off = np.zeros((10, 3))
    off[:5, 0], off[5:, 0] = 0.050, 0.150
    assert pck(j + off, j) == 50.0
    assert mpjpe(j + off, j) == pytest.approx(100.0, abs=1e-9)


@given(arrays(np.float64, (8, 3), elements=coords), arrays(np.float64, (8, 3), elements=coords),
       st.floats(1, 500), st.floats(1, 500))
def test_pck_monotone_in_threshold(a, b, t1, t2):
    lo, hi = sorted((t1, t2))
    assert pck(a, b, lo) <= pck(a, b, hi)


# -- Chamfer ---------------------------------------------------------------

def test_chamfer_identical_is_zero(rng):
    a = rng.normal(size=(30, 3))
    assert chamfer(a, a) == 0.0


def test_chamfer_two_point_hand_enumeration():
    a = np.array([[0.0, 0, 0], [1, 0, 0]])
    b = np.array([[0.0, 0.5, 0]])
    # a -> b: 0.5 and sqrt(1.25); b -> a: 0.5
    ref = 0.5 * ((0.5 + np.sqrt(1.25)) / 2 + 0.5) * 1000
    assert abs(chamfer(a, b) - ref) <= 1e-12 * ref
    assert abs(chamfer(b, a) - ref) <= 1e-12 * ref


def test_chamfer_empty():
    with pytest.raises(EmptyCloud):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


def test_chamfer_brute_force(rng):
    a, b = rng.normal(size=(25, 3)), rng.normal(size=(18, 3))
    d = np.linalg.norm(a[:, None] - b[None], axis=2)
    ref = 0.5 * (d.min(1).mean() + d.min(0).mean()) * 1000
    assert abs(chamfer(a, b) - ref) <= 1e-9


@given(arrays(np.float64, (6, 3), elements=coords), arrays(np.float64, (4, 3), elements=coords),
       arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=coords))
@settings(max_examples=80)
def test_chamfer_symmetric_and_rigid_invariant(a, b, axis, shift):
    R = rodrigues(axis)
    c = chamfer(a, b)
    assert c >= 0
    assert abs(c - chamfer(b, a)) <= 1e-9
    assert abs(c - chamfer(a @ R.T + shift, b @ R.T + shift)) <= 1e-6


# -- correspondences -------------------------------------------------------

def test_one_hot_rows_give_indices():
    idx = np.array([2, 0, 1, 2])
    cmap = extract_correspondences(PosteriorMatrix.one_hot(idx, 3))
    assert np.array_equal(cmap.index, idx)
    assert np.array_equal(cmap.confidence, np.ones(4))


def test_heavy_outlier_row_is_flagged():
    post = PosteriorMatrix.from_resp([[0.3, 0.1], [0.7, 0.2]])
    assert post.outlier_mass[0] == pytest.approx(0.6)
    assert extract_correspondences(post).index.tolist() == [OUTLIER, 0]


def test_ties_go_to_lowest_index():
    cmap = extract_correspondences(PosteriorMatrix.from_resp([[0.0, 0.5, 0.5]]))
    assert cmap.index.tolist() == [1]


def test_sharp_posterior_gives_nearest_neighbour(rng):
    cloud, verts = rng.uniform(-1, 1, (40, 3)), rng.uniform(-1, 1, (25, 3))
    d2 = ((cloud[:, None] - verts[None]) ** 2).sum(-1)
    srt = np.sort(d2, axis=1)
    assert np.all(srt[:, 1] - srt[:, 0] > 1e-4)
    post = posterior(cloud, verts, MixtureConfig(0.0), MixtureState(1e-6, 1e-6))
    assert np.array_equal(extract_correspondences(post).index, d2.argmin(1))


def test_identical_scans_identity_maps(rng):
    pts = rng.normal(size=(20, 3))
    err = correspondence_error(identity_map(20), identity_map(20), pts,
                               np.c_[np.arange(20), np.arange(20)], pts)
    assert err.mean_mm == 0.0 and err.n_used == 20 and err.n_missing == 0


def test_rigidly_moved_scan_exact_maps(rng):
    tmpl = rng.normal(size=(30, 3))
    perm = rng.permutation(30)
    b = tmpl[perm] @ rodrigues([0.3, -0.2, 1.0]).T + [1, 2, 3]
    # B point k is template vertex perm[k]; A is the template itself
    map_b = CorrespondenceMap(perm, np.ones(30))
    pairs = np.c_[perm, np.arange(30)]
    err = correspondence_error(identity_map(30), map_b, b, pairs, tmpl)
    assert err.mean_mm == 0.0


def brute_force_routing(idx_a, idx_b, pts_b, pairs, tmpl):
    errs = []
    for i, j in pairs:
        if idx_a[i] < 0:
            continue
        best, best_d = None, np.inf
        for k in range(len(idx_b)):
            if idx_b[k] < 0:
                continue
            d = float(np.sum((tmpl[idx_b[k]] - tmpl[idx_a[i]]) ** 2))
            if d < best_d:
                best, best_d = k, d
        errs.append(np.linalg.norm(pts_b[best] - pts_b[j]))
    return 1000 * float(np.mean(errs)), len(errs)


@given(st.integers(0, 100_000))
@settings(max_examples=40)
def test_routing_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    tmpl = rng.normal(size=(15, 3))
    na, nb = 12, 10
    idx_a = rng.integers(-1, 15, na)
    idx_b = rng.integers(-1, 15, nb)
    idx_b[0] = max(idx_b[0], 0)
    pts_b = rng.normal(size=(nb, 3))
    pairs = np.c_[rng.integers(0, na, 8), rng.integers(0, nb, 8)]
    pairs[0, 0] = int(np.flatnonzero(idx_a >= 0)[0]) if np.any(idx_a >= 0) else 0
    idx_a[pairs[0, 0]] = max(idx_a[pairs[0, 0]], 0)
    ma = CorrespondenceMap(idx_a, np.ones(na))
    mb = CorrespondenceMap(idx_b, np.ones(nb))
    err = correspondence_error(ma, mb, pts_b, pairs, tmpl)
    ref, used = brute_force_routing(idx_a, idx_b, pts_b, pairs, tmpl)
    assert abs(err.mean_mm - ref) <= 1e-9
    assert err.n_used == used and err.n_used + err.n_missing == len(pairs)
    assert err.mean_mm >= 0


def test_outlier_routes_are_counted():
    tmpl = np.eye(3)
    ma = CorrespondenceMap(np.array([OUTLIER, 1]), np.ones(2))
    err = correspondence_error(ma, identity_map(3), tmpl, [[0, 0], [1, 1]], tmpl)
    assert err.n_missing == 1 and err.n_used == 1 and err.mean_mm == 0.0


def test_everything_outlier_raises():
    tmpl = np.eye(3)
    ma = CorrespondenceMap(np.array([OUTLIER]), np.ones(1))
    with pytest.raises(MissingCorrespondence):
        correspondence_error(ma, identity_map(3), tmpl, [[0, 0]], tmpl)
    mb = CorrespondenceMap(np.full(3, OUTLIER), np.ones(3))
    with pytest.raises(MissingCorrespondence):
        correspondence_error(identity_map(3), mb, tmpl, [[0, 0]], tmpl)
