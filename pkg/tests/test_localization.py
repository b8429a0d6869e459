"""Registration tests: downsampling, association, robust alignment, gating."""

import math

import numpy as np
import pytest

from cloudgen import forest_cloud, registration_case
from forestnav.errors import LocalizationRejected, NoCorrespondences
from forestnav.localization import (
    PoseEstimate,
    RegistrationParams,
    apply_transform,
    associate,
    boxplus,
    exp_so3,
    gm_rho,
    gm_weight,
    localize,
    make_transform,
    robust_register,
    rotation_angle,
    voxel_downsample,
)


def test_downsample_collapses_voxel():
    pts = np.array([[0.05, 0.05, 0.05], [0.06, 0.06, 0.06], [1.0, 1.0, 1.0]])
    prior = voxel_downsample(pts, 0.25)
    assert len(prior) == 2
    assert np.array_equal(prior.points[0], pts[0])  # first-come retention


def test_downsample_keeps_spread_points():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 50, (200, 3))  # far sparser than the voxel size
    prior = voxel_downsample(pts, 0.25)
    assert len(prior) == len(np.unique(np.floor(pts / 0.25).astype(int), axis=0))


def test_downsample_matches_bucketing_oracle():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-2, 2, (3000, 3))
    prior = voxel_downsample(pts, 0.3)
    seen = set()
    expect = []
    for i, p in enumerate(pts):
        key = tuple(np.floor(p / 0.3).astype(int))
        if key not in seen:
            seen.add(key)
            expect.append(i)
    assert np.array_equal(prior.points, pts[expect])


def test_associate_identity_self_correspondence():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 20, (500, 3))
    prior = voxel_downsample(pts, 1e-6)
    s_idx, m_idx = associate(pts, prior, np.eye(4), 0.5)
    assert len(s_idx) == 500
    assert np.allclose(np.linalg.norm(pts[s_idx] - prior.points[m_idx], axis=1), 0.0)


def test_associate_drops_isolated_points():
    prior = voxel_downsample(np.array([[0.0, 0.0, 0.0]]), 0.1)
    scan = np.array([[0.1, 0.0, 0.0], [5.0, 5.0, 5.0]])
    s_idx, m_idx = associate(scan, prior, np.eye(4), 1.0)
    assert list(s_idx) == [0]


def test_associate_matches_exhaustive_search():
    rng = np.random.default_rng(4)
    map_pts = rng.uniform(-10, 10, (1000, 3))
    scan = rng.uniform(-10, 10, (300, 3))
    prior = voxel_downsample(map_pts, 1e-6)
    T = make_transform(exp_so3(np.array([0, 0, 0.1])), np.array([0.3, -0.2, 0.0]))
    s_idx, m_idx = associate(scan, prior, T, 1.0)
    moved = apply_transform(T, scan)
    got = dict(zip(s_idx.tolist(), m_idx.tolist()))
    for i, p in enumerate(moved):
        d = np.linalg.norm(prior.points - p, axis=1)
        j = int(np.argmin(d))
        if d[j] <= 1.0:
            assert got[i] == j
        else:
            assert i not in got


def test_kernel_sanity():
    assert gm_weight(0.0, 0.5) == 1.0
    es = np.linspace(0.0, 4.0, 100)
    ws = gm_weight(es, 0.5)
    assert np.all(np.diff(ws) < 0)
    assert gm_rho(0.0, 0.5) == 0.0
    # rho saturates toward c^2 for large residuals
    assert gm_rho(1e9, 0.5) < 0.2500001


def test_register_identity_fixed_point():
    rng = np.random.default_rng(5)
    world, _ = forest_cloud(rng, n_trees=30, half=10.0)
    prior = voxel_downsample(world, 0.25)
    scan = prior.points[::2].copy()
    est = robust_register(scan, prior, np.eye(4))
    assert np.linalg.norm(est.translation) < 1e-9
    assert rotation_angle(est.rotation) < 1e-9
    assert est.final_cost == pytest.approx(0.0, abs=1e-12)
    assert est.inlier_fraction == 1.0


def test_register_known_transform_with_outliers():
    for seed in range(10):
        scan, world, T_true, _ = registration_case(seed)
        prior = voxel_downsample(world, 0.25)
        est = robust_register(scan, prior, np.eye(4))
        terr = np.linalg.norm(est.translation - T_true[:3, 3])
        rerr = math.degrees(rotation_angle(est.rotation.T @ T_true[:3, :3]))
        assert terr < 0.01, (seed, terr)
        assert rerr < 0.5, (seed, rerr)


def test_nonrobust_ablation_pulled_by_outliers():
    failures = 0
    for seed in range(10):
        scan, world, T_true, _ = registration_case(seed)
        prior = voxel_downsample(world, 0.25)
        est = robust_register(scan, prior, np.eye(4), RegistrationParams(robust=False))
        if np.linalg.norm(est.translation - T_true[:3, 3]) > 0.05:
            failures += 1
    assert failures >= 1


def test_cost_monotone_under_fixed_associations():
    scan, world, T_true, _ = registration_case(0)
    prior = voxel_downsample(world, 0.25)
    est = robust_register(scan, prior, np.eye(4))
    assert est.cost_trace, "no accepted steps recorded"
    for before, after in est.cost_trace:
        assert after < before


def test_rotation_stays_orthonormal():
    scan, world, _, _ = registration_case(1)
    prior = voxel_downsample(world, 0.25)
    est = robust_register(scan, prior, np.eye(4))
    r = est.rotation
    assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)


def test_frame_consistency():
    """Registering a rigidly moved scan equals composing the motion."""
    scan, world, T_true, _ = registration_case(2, outlier_fraction=0.0)
    prior = voxel_downsample(world, 0.25)
    est_a = robust_register(scan, prior, np.eye(4))
    g = make_transform(exp_so3(np.array([0.0, 0.0, 0.05])), np.array([0.4, -0.3, 0.02]))
    moved = apply_transform(g, scan)
    est_b = robust_register(moved, prior, est_a.transform @ np.linalg.inv(g))
    recomposed = est_b.transform @ g
    assert np.linalg.norm(recomposed[:3, 3] - est_a.transform[:3, 3]) < 1e-6
    assert rotation_angle(recomposed[:3, :3].T @ est_a.rotation) < 1e-6


def test_register_raises_without_correspondences():
    prior = voxel_downsample(np.random.default_rng(0).uniform(0, 5, (100, 3)), 0.25)
    far_scan = np.full((50, 3), 500.0)
    with pytest.raises(NoCorrespondences):
        robust_register(far_scan, prior, np.eye(4))
    with pytest.raises(NoCorrespondences):
        robust_register(np.empty((0, 3)), prior, np.eye(4))


def test_localize_clean_scene_high_inliers():
    scan, world, T_true, _ = registration_case(3, outlier_fraction=0.0)
    prior = voxel_downsample(world, 0.25)
    est = localize(scan, prior, np.eye(4))
    assert est.inlier_fraction > 0.9


def test_localize_scene_change_tolerated():
    scan, world, T_true, _ = registration_case(4, scene_change=0.1)
    prior = voxel_downsample(world, 0.25)
    est = localize(scan, prior, np.eye(4))
    assert np.linalg.norm(est.translation - T_true[:3, 3]) < 0.01


def test_localize_rejects_far_guess():
    """A 10 m-off guess must be rejected, never silently accepted."""
    scan, world, T_true, _ = registration_case(5)
    prior = voxel_downsample(world, 0.25)
    bad_guess = make_transform(translation=np.array([10.0, 0.0, 0.0]))
    try:
        est = localize(scan, prior, bad_guess)
    except LocalizationRejected:
        return
    # If something was returned it must not be a confident wrong answer.
    terr = np.linalg.norm(est.translation - T_true[:3, 3])
    assert terr < 0.05 or est.inlier_fraction < 0.3, (terr, est.inlier_fraction)


def test_boxplus_applies_rotation_and_translation():
    T = np.eye(4)
    out = boxplus(T, np.array([0.0, 0.0, math.pi / 2, 1.0, 2.0, 3.0]))
    assert np.allclose(out[:3, 3], [1.0, 2.0, 3.0])
    assert np.allclose(out[:3, :3] @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)
