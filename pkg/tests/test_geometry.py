import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dynsplat.geometry import (
    BehindCamera,
    Camera,
    DegenerateCovariance,
    Pose,
    QuaternionNormWarning,
    back_project,
    project_cov,
    project_point,
    quat_to_rot,
    rot_to_quat,
    world_cov,
)

S45 = math.sin(math.pi / 4)


def rodrigues(axis, angle):
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 0.1).map(lambda q: np.asarray(q) / np.linalg.norm(q))
scales = st.lists(st.floats(1e-3, 10.0), min_size=3, max_size=3).map(np.asarray)


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 4.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 1.0, 1.0, 4, 4, depth_scale=0.0)


def test_quat_identity():
    assert np.array_equal(quat_to_rot([0, 0, 0, 1]), np.eye(3))


def test_quat_90_about_z_matches_rodrigues():
    R = quat_to_rot([0, 0, S45, S45])
    assert np.allclose(R, rodrigues([0, 0, 1], math.pi / 2), atol=1e-12)
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_quat_180_about_x():
    R = quat_to_rot([1, 0, 0, 0])
    assert np.allclose(R, rodrigues([1, 0, 0], math.pi), atol=1e-12)
    assert np.allclose(R, np.diag([1, -1, -1]), atol=1e-12)


def test_quat_normalizes_and_warns():
    with pytest.warns(QuaternionNormWarning):
        R = quat_to_rot([0, 0, 0, 2.0])
    assert np.allclose(R, np.eye(3))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        quat_to_rot([0, 0, 0, 1 + 1e-7])


@given(unit_quats)
def test_quat_matches_scipy(q):
    assert np.allclose(quat_to_rot(q), Rotation.from_quat(q).as_matrix(), atol=1e-12)


@given(unit_quats)
def test_rotation_is_proper(q):
    R = quat_to_rot(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9
    assert np.allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-9)


def test_world_cov_examples():
    assert np.allclose(world_cov([1, 1, 1], [0, 0, 0, 1]), np.eye(3))
    assert np.allclose(world_cov([2, 1, 1], [0, 0, 0, 1]), np.diag([4, 1, 1]))
    R = rodrigues([0, 0, 1], math.pi / 2)
    explicit = R @ np.diag([2, 1, 1]) @ np.diag([2, 1, 1]).T @ R.T
    got = world_cov([2, 1, 1], [0, 0, S45, S45])
    assert np.allclose(got, explicit, atol=1e-12)
    assert np.allclose(got, np.diag([1, 4, 1]), atol=1e-12)


@pytest.mark.parametrize("bad", [[0, 1, 1], [1, -1, 1]])
def test_world_cov_degenerate(bad):
    with pytest.raises(DegenerateCovariance, match="degenerate covariance"):
        world_cov(bad, [0, 0, 0, 1])


@given(scales, unit_quats)
def test_world_cov_spd_with_scale_eigenvalues(s, q):
    C = world_cov(s, q)
    assert np.allclose(C, C.T, atol=1e-12 * C.max())
    np.linalg.cholesky(C)
    ev = np.sort(np.linalg.eigvalsh(C))
    assert np.allclose(ev, np.sort(s**2), rtol=1e-9, atol=1e-9 * (s**2).max())


def test_project_point_examples(cam100):
    assert project_point([0, 0, 2], Pose(), cam100) == (50.0, 50.0, 2.0)
    assert project_point([1, 0, 2], Pose(), cam100) == (100.0, 50.0, 2.0)
    with pytest.raises(BehindCamera, match="behind camera"):
        project_point([0, 0, -1], Pose(), cam100)
    with pytest.raises(BehindCamera):
        project_point([0, 0, 0.005], Pose(), cam100)


@given(unit_quats, st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.floats(0, 99), st.floats(0, 99), st.floats(0.05, 20))
def test_back_project_round_trip(q, t, u, v, z):
    cam = Camera(100.0, 100.0, 50.0, 50.0, 100, 100)
    pose = Pose(q, t)
    u2, v2, z2 = project_point(back_project(u, v, z, pose, cam), pose, cam)
    assert abs(u2 - u) < 1e-9 * max(1, u) and abs(v2 - v) < 1e-9 * max(1, v) and abs(z2 - z) < 1e-9 * z


@given(unit_quats, st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_pose_inverse_composition(q, t):
    p = Pose(q, t)
    assert np.allclose((p @ p.inverse()).matrix(), np.eye(4), atol=1e-9)
    assert abs(np.linalg.norm(p.rotation) - 1) < 1e-9


def test_project_cov_examples(cam100):
    s, z = 0.1, 2.0
    cov = project_cov(np.eye(3) * s**2, Pose(), cam100, [0, 0, z])
    assert np.allclose(cov, np.diag([(100 * s / z) ** 2 + 0.3] * 2), atol=1e-12)
    assert np.allclose(project_cov(np.zeros((3, 3)), Pose(), cam100, [0, 0, z]), np.diag([0.3, 0.3]))


@given(unit_quats, unit_quats, scales.map(lambda s: s / 10))
@settings(max_examples=50)
def test_project_cov_equivariance(q_world, q_g, s):
    # rotating both camera and scene by the same world rotation leaves the footprint unchanged
    cam = Camera(100.0, 100.0, 50.0, 50.0, 100, 100)
    pose = Pose(np.array([0.1, -0.2, 0.05, 1.0]) / np.linalg.norm([0.1, -0.2, 0.05, 1.0]), [0.3, -0.1, 0.2])
    mu = pose.transform(np.array([0.2, 0.1, 2.5]))
    sigma = world_cov(s, q_g)
    Q = quat_to_rot(q_world)
    moved = Pose.from_matrix(np.block([[Q, np.zeros((3, 1))], [np.zeros((1, 3)), np.ones((1, 1))]]) @ pose.matrix())
    p_cam = pose.inverse().transform(mu)
    p_cam2 = moved.inverse().transform(Q @ mu)
    a = project_cov(sigma, pose, cam, p_cam)
    b = project_cov(Q @ sigma @ Q.T, moved, cam, p_cam2)
    assert np.allclose(p_cam, p_cam2, atol=1e-9)
    assert np.allclose(a, b, atol=1e-9 * max(1.0, np.abs(a).max()))
