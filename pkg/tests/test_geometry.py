"""Projection and rotation primitives against hand-derived values.

Hand derivations used below:

  backproject, fx=fy=100, cx=cy=50, p=(60,50), d=2:
      x = d*(u-cx)/fx = 2*10/100 = 0.2, y = 0, z = 2        -> (0.2, 0, 2)

  correspondence, same K, p=(60,50), d=2, R=I, T=(0,0,-1):
      X  = (0.2, 0, 2)
      X' = X + T = (0.2, 0, 1)
      u' = 100*0.2/1 + 50 = 70, v' = 50                     -> (70, 50)

  slerp proportionality is checked against the trace-based geodesic
  distance, which never goes through the axis-angle code path.
"""

import numpy as np
import pytest

from geowm.errors import BehindCameraError
from geowm.geometry import (
    CameraIntrinsics,
    RigidTransform,
    backproject,
    compose,
    geodesic_distance,
    invert,
    project,
    project_correspondence,
    project_points,
    relative,
    rotation_mean,
    slerp,
    so3_exp,
    so3_log,
)


def _K(fx=100.0, fy=100.0, cx=50.0, cy=50.0):
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy)


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _random_rotation(rng):
    return so3_exp(rng.normal(size=3))


# ---------------------------------------------------------------------------
# backproject / project


def test_backproject_principal_point():
    p = backproject((50.0, 50.0), 2.0, _K())
    np.testing.assert_allclose(p, [0.0, 0.0, 2.0], atol=1e-15)


def test_backproject_hand_value():
    p = backproject((60.0, 50.0), 2.0, _K())
    np.testing.assert_allclose(p, [0.2, 0.0, 2.0], atol=1e-12)


def test_backproject_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        backproject((10.0, 10.0), 0.0, _K())
    with pytest.raises(ValueError):
        backproject((10.0, 10.0), -1.0, _K())


def test_project_backproject_roundtrip():
    rng = np.random.default_rng(0)
    K = _K(fx=73.0, fy=91.0, cx=31.5, cy=47.25)
    for _ in range(100):
        uv = rng.uniform(0.0, 100.0, size=2)
        d = rng.uniform(0.1, 10.0)
        back = project(backproject(uv, d, K), K)
        np.testing.assert_allclose(back, uv, atol=1e-9)


def test_project_rejects_behind_camera():
    with pytest.raises(BehindCameraError):
        project(np.array([0.0, 0.0, 0.0]), _K())
    with pytest.raises(BehindCameraError):
        project(np.array([0.1, 0.1, -2.0]), _K())


def test_project_points_matches_scalar_path():
    rng = np.random.default_rng(1)
    K = _K()
    pts = np.column_stack(
        [rng.normal(size=20), rng.normal(size=20), rng.uniform(0.5, 5.0, size=20)]
    )
    batch = project_points(pts, K)
    single = np.array([project(p, K) for p in pts])
    np.testing.assert_allclose(batch, single, atol=1e-12)


# ---------------------------------------------------------------------------
# correspondence


def test_correspondence_identity_motion():
    uv = project_correspondence((60.0, 50.0), 2.0, _K(), RigidTransform.identity())
    np.testing.assert_allclose(uv, [60.0, 50.0], atol=1e-9)


def test_correspondence_axis_point_invariant_under_z_translation():
    pose = RigidTransform(np.eye(3), [0.0, 0.0, -1.0])
    uv = project_correspondence((50.0, 50.0), 2.0, _K(), pose)
    np.testing.assert_allclose(uv, [50.0, 50.0], atol=1e-12)


def test_correspondence_hand_value():
    pose = RigidTransform(np.eye(3), [0.0, 0.0, -1.0])
    uv = project_correspondence((60.0, 50.0), 2.0, _K(), pose)
    np.testing.assert_allclose(uv, [70.0, 50.0], atol=1e-9)


def test_correspondence_behind_camera_is_error():
    pose = RigidTransform(np.eye(3), [0.0, 0.0, -2.5])
    with pytest.raises(BehindCameraError):
        project_correspondence((60.0, 50.0), 2.0, _K(), pose)


def test_correspondence_applies_scene_flow():
    # Static camera, point pushed 0.2m along +x in the next frame.
    uv = project_correspondence(
        (50.0, 50.0), 2.0, _K(), RigidTransform.identity(), scene_flow=[0.2, 0.0, 0.0]
    )
    np.testing.assert_allclose(uv, [60.0, 50.0], atol=1e-9)


# ---------------------------------------------------------------------------
# rotations


def test_geodesic_distance_basics():
    assert geodesic_distance(np.eye(3), np.eye(3)) == 0.0
    assert geodesic_distance(np.eye(3), _rot_z(np.pi)) == pytest.approx(np.pi, abs=1e-12)
    assert geodesic_distance(np.eye(3), _rot_x(np.pi / 2)) == pytest.approx(np.pi / 2, abs=1e-12)


def test_geodesic_distance_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(20):
        R1, R2 = _random_rotation(rng), _random_rotation(rng)
        d12 = geodesic_distance(R1, R2)
        d21 = geodesic_distance(R2, R1)
        assert d12 == pytest.approx(d21, abs=1e-12)
        assert 0.0 <= d12 <= np.pi


def test_slerp_endpoints_and_midpoint():
    R2 = _rot_z(np.pi / 2)
    np.testing.assert_allclose(slerp(np.eye(3), R2, 0.0), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(slerp(np.eye(3), R2, 1.0), R2, atol=1e-12)
    np.testing.assert_allclose(slerp(np.eye(3), R2, 0.5), _rot_z(np.pi / 4), atol=1e-12)


def test_slerp_proportionality_random_pairs():
    rng = np.random.default_rng(3)
    for _ in range(100):
        R1, R2 = _random_rotation(rng), _random_rotation(rng)
        u = rng.uniform(0.0, 1.0)
        R = slerp(R1, R2, u)
        assert geodesic_distance(R1, R) == pytest.approx(
            u * geodesic_distance(R1, R2), abs=1e-9
        )


def test_slerp_rejects_out_of_range():
    with pytest.raises(ValueError):
        slerp(np.eye(3), _rot_z(1.0), -0.1)
    with pytest.raises(ValueError):
        slerp(np.eye(3), _rot_z(1.0), 1.1)


def test_rotation_outputs_satisfy_invariants():
    rng = np.random.default_rng(4)
    for _ in range(50):
        R = slerp(_random_rotation(rng), _random_rotation(rng), rng.uniform(0, 1))
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_so3_log_exp_roundtrip():
    rng = np.random.default_rng(5)
    for _ in range(50):
        w = rng.normal(size=3)
        w = w / np.linalg.norm(w) * rng.uniform(1e-8, np.pi - 1e-3)
        np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-9)


def test_so3_log_near_pi():
    for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0.6, 0.8, 0.0])):
        w = axis / np.linalg.norm(axis) * (np.pi - 1e-9)
        R = so3_exp(w)
        got = so3_log(R)
        np.testing.assert_allclose(so3_exp(got), R, atol=1e-7)


def test_rotation_mean_two_elements_is_midpoint():
    R1, R2 = _rot_z(0.2), _rot_z(0.8)
    np.testing.assert_allclose(rotation_mean([R1, R2]), _rot_z(0.5), atol=1e-10)


# ---------------------------------------------------------------------------
# SE(3) group ops


def test_invert_identity():
    ident = invert(RigidTransform.identity())
    np.testing.assert_allclose(ident.R, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(ident.t, np.zeros(3), atol=1e-15)


def test_compose_with_inverse_is_identity():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = RigidTransform(_random_rotation(rng), rng.normal(size=3))
        e = compose(invert(a), a)
        np.testing.assert_allclose(e.R, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(e.t, np.zeros(3), atol=1e-9)


def test_translation_only_composition_adds():
    a = RigidTransform(np.eye(3), [1.0, 2.0, 3.0])
    b = RigidTransform(np.eye(3), [0.5, -1.0, 0.25])
    ab = compose(a, b)
    np.testing.assert_allclose(ab.t, [1.5, 1.0, 3.25], atol=1e-15)


def test_compose_matches_sequential_apply():
    rng = np.random.default_rng(7)
    a = RigidTransform(_random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(_random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=3)
    np.testing.assert_allclose(compose(a, b).apply(x), a.apply(b.apply(x)), atol=1e-12)


def test_relative_maps_between_frames():
    rng = np.random.default_rng(8)
    pose_a = RigidTransform(_random_rotation(rng), rng.normal(size=3))
    pose_b = RigidTransform(_random_rotation(rng), rng.normal(size=3))
    x_world = rng.normal(size=3)
    rel = relative(pose_b, pose_a)
    np.testing.assert_allclose(rel.apply(pose_a.apply(x_world)), pose_b.apply(x_world), atol=1e-12)


def test_rigid_transform_validates_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(-np.eye(3), np.zeros(3))  # det = -1
