import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgedepth.errors import PointBehindCamera
from edgedepth.geometry import (
    Camera,
    Keypoint3D,
    Pose,
    denormalize,
    normalize,
    normalize_points,
    project,
    project_points,
    rotation_apply,
    wrap_yaw,
)

from conftest import make_instance

CAM = Camera(100.0, 100.0, 50.0, 50.0)


def test_rotation_identity():
    assert np.allclose(rotation_apply(0.0, (1.0, 2.0, 3.0)), (1.0, 2.0, 3.0))


def test_rotation_quarter_turn():
    out = rotation_apply(math.pi / 2.0, (1.0, 0.0, 0.0))
    assert np.allclose(out, (0.0, 0.0, -1.0), atol=1e-15)


def test_rotation_matches_matrix_oracle():
    # independent oracle: build the 3x3 yaw matrix and multiply
    r_y, p = math.pi / 6.0, np.array([1.0, 0.5, 2.0])
    c, s = math.cos(r_y), math.sin(r_y)
    R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    assert np.allclose(rotation_apply(r_y, p), R @ p, atol=1e-15)


def test_project_origin_hits_principal_point():
    px, s = project(CAM, Pose(0.0, (0.0, 0.0, 10.0)), (0.0, 0.0, 0.0))
    assert px == (50.0, 50.0)
    assert s == 10.0


def test_project_unit_offset():
    # hand-evaluated pinhole: X=1, s=10 -> u = 100*1/10 + 50 = 60
    px, s = project(CAM, Pose(0.0, (0.0, 0.0, 10.0)), (1.0, 0.0, 0.0))
    assert px == pytest.approx((60.0, 50.0), abs=1e-12)
    assert s == 10.0


def test_project_behind_camera():
    with pytest.raises(PointBehindCamera):
        project(CAM, Pose(0.0, (0.0, 0.0, -1.0)), (0.0, 0.0, 0.0))


def test_project_points_matches_scalar(clean_instance):
    inst = clean_instance
    uv, s = project_points(inst.camera, inst.pose, inst.kp3d_clean)
    for i in range(inst.n):
        px, si = project(inst.camera, inst.pose, inst.kp3d_clean[i])
        assert np.allclose(uv[i], px, atol=1e-12)
        assert s[i] == pytest.approx(si, abs=0.0)


def test_normalize_principal_point():
    assert normalize(CAM, (50.0, 50.0)) == (0.0, 0.0)
    assert normalize(CAM, (150.0, 50.0)) == (1.0, 0.0)


@given(st.floats(-2000, 2000), st.floats(-2000, 2000))
def test_normalize_denormalize_round_trip(u, v):
    npx = normalize(CAM, (u, v))
    back = denormalize(CAM, npx)
    assert abs(back.u - u) < 1e-12 and abs(back.v - v) < 1e-12


def test_projection_residuals_noiseless():
    # u~*s == X and v~*s == Y for exact projections
    for seed in range(20):
        inst = make_instance(seed=seed)
        npx = normalize_points(inst.camera, inst.kp2d_clean)
        r_y = inst.pose.r_y
        c, s_ = math.cos(r_y), math.sin(r_y)
        kp = inst.kp3d_clean
        S = inst.pose.z_c - kp[:, 0] * s_ + kp[:, 2] * c
        X = inst.pose.x_c + kp[:, 0] * c + kp[:, 2] * s_
        Y = inst.pose.y_c + kp[:, 1]
        assert np.abs(npx[:, 0] * S - X).max() < 1e-10
        assert np.abs(npx[:, 1] * S - Y).max() < 1e-10


def test_depth_equals_rotated_z_plus_translation(clean_instance):
    inst = clean_instance
    _, s = project_points(inst.camera, inst.pose, inst.kp3d_clean)
    for i in range(inst.n):
        rot = rotation_apply(inst.pose.r_y, inst.kp3d_clean[i])
        assert s[i] == rot[2] + inst.pose.z_c


def test_projection_invariant_under_full_turn():
    pose = Pose(0.5, (1.0, -0.5, 12.0))
    pose2 = Pose(0.5 + 2.0 * math.pi, (1.0, -0.5, 12.0))
    p = (0.7, -0.2, 1.1)
    px1, s1 = project(CAM, pose, p)
    px2, s2 = project(CAM, pose2, p)
    assert np.allclose(px1, px2, atol=1e-9)
    assert s1 == pytest.approx(s2, abs=1e-12)


@given(st.floats(-50.0, 50.0, allow_nan=False))
def test_wrap_yaw_canonical(r):
    w = wrap_yaw(r)
    assert -math.pi <= w < math.pi
    # wrapping is idempotent and preserves the angle modulo 2*pi
    assert wrap_yaw(w) == w
    assert math.isclose(math.cos(w), math.cos(r), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(r), abs_tol=1e-9)


def test_pose_wraps_yaw_on_construction():
    assert Pose(math.pi, (0, 0, 1)).r_y == -math.pi
    assert Pose(3.0 * math.pi, (0, 0, 1)).r_y == pytest.approx(-math.pi, abs=1e-12)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(-1.0, 100.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        Camera(float("nan"), 100.0, 0.0, 0.0)


def test_keypoint_as_array():
    kp = Keypoint3D(1.0, 2.0, 3.0, index=4)
    assert np.array_equal(kp.as_array(), [1.0, 2.0, 3.0])
    assert rotation_apply(0.0, kp)[0] == 1.0
