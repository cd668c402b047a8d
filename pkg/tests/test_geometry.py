import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadlift.geometry import (
    BehindCamera,
    Box2D,
    Box3D,
    CameraModel,
    GeometryError,
    GimbalLockWarning,
    box_corners,
    box_from_corners,
    closest_point_on_ray,
    euler_to_matrix,
    is_rotation,
    load_camera,
    matrix_to_euler,
    pixel_ray,
    project,
    save_camera,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def test_project_optical_axis(simple_camera):
    uv = project(simple_camera, [10.0, 0.0, 0.0])
    assert np.allclose(uv, (960.0, 540.0), atol=1e-12)


def test_project_similar_triangles():
    cam = CameraModel(1000.0, 1000.0, 0.0, 0.0, 100, 100, np.eye(3), np.zeros(3))
    assert np.allclose(project(cam, [1.0, 0.0, 10.0]), (100.0, 0.0), atol=1e-12)


def test_project_behind_camera(simple_camera):
    with pytest.raises(BehindCamera):
        project(simple_camera, [-1.0, 0.0, 0.0])
    with pytest.raises(BehindCamera):
        project(simple_camera, [0.0, 3.0, 1.0])


def test_projection_may_leave_image(simple_camera):
    uv = project(simple_camera, [1.0, -5.0, 0.0])
    assert uv[0] > simple_camera.image_width


def test_principal_ray_along_axis(simple_camera):
    ray = pixel_ray(simple_camera, (simple_camera.cx, simple_camera.cy))
    assert np.allclose(ray.direction, [1, 0, 0], atol=1e-15)
    assert np.allclose(ray.origin, 0.0)


def test_principal_ray_hits_ground_at_analytic_range():
    # 11 m mast, 6 deg down: flat ground hit at 11 / tan(6 deg)
    cam = CameraModel.from_pose((0.0, 0.0, 11.0), 0.0, math.radians(6.0))
    ray = pixel_ray(cam, (cam.cx, cam.cy))
    t = -ray.origin[2] / ray.direction[2]
    hit = ray.at(t)
    assert abs(hit[0] - 11.0 / math.tan(math.radians(6.0))) < 1e-6
    assert abs(hit[0] - 104.658) < 1e-3


@settings(max_examples=300, deadline=None)
@given(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.2, 300),
    angles, st.floats(-0.5, 0.5),
)  # fmt: skip
def test_project_ray_round_trip(x, y, z, yaw, pitch):
    cam = CameraModel.from_pose((1.0, -2.0, 5.0), yaw, pitch)
    p = cam.to_world([x, y, z])  # camera-frame point with z > 0.1
    uv = project(cam, p)
    q = closest_point_on_ray(pixel_ray(cam, uv), p)
    assert np.linalg.norm(q - p) < 1e-9 * max(np.linalg.norm(p), 1.0)


def test_unit_cube_corners():
    c = box_corners(Box3D((0, 0, 0), (1, 1, 1), (0, 0, 0)))
    assert c.shape == (9, 3)
    assert np.allclose(np.abs(c[:8]), 0.5)
    assert np.allclose(c[8], 0.0)
    # front-left, front-right, rear-right, rear-left at the bottom
    assert np.allclose(c[0], [0.5, 0.5, -0.5])
    assert np.allclose(c[1], [0.5, -0.5, -0.5])
    assert np.allclose(c[2], [-0.5, -0.5, -0.5])
    assert np.allclose(c[3], [-0.5, 0.5, -0.5])
    assert np.allclose(c[4:8, 2], 0.5)
    assert np.allclose(c[4:8, :2], c[0:4, :2])


def test_yaw_quarter_turn_permutes_footprint():
    a = box_corners(Box3D((0, 0, 0), (2, 2, 1), (0, 0, 0)))
    b = box_corners(Box3D((0, 0, 0), (2, 2, 1), (math.pi / 2, 0, 0)))
    # a square footprint turned a quarter: corner i lands where corner i-1 was
    for i in range(4):
        assert np.allclose(b[i], a[(i - 1) % 4], atol=1e-12)


def test_size_axes():
    c = box_corners(Box3D((0, 0, 0), (2.0, 4.0, 1.5), (0, 0, 0)))
    assert np.ptp(c[:8, 0]) == pytest.approx(4.0)  # length along X
    assert np.ptp(c[:8, 1]) == pytest.approx(2.0)  # width along Y
    assert np.ptp(c[:8, 2]) == pytest.approx(1.5)


def test_corner_mean_and_reconstruction():
    rng = np.random.default_rng(0)
    for _ in range(500):
        box = Box3D(rng.uniform(-100, 100, 3), rng.uniform(0.1, 10, 3), (
            rng.uniform(-math.pi, math.pi), rng.uniform(-1.4, 1.4), rng.uniform(-math.pi, math.pi)))
        c = box_corners(box)
        assert np.allclose(c[:8].mean(axis=0), c[8], atol=1e-12 * max(1.0, np.abs(c).max()))
        back = box_from_corners(c)
        assert np.allclose(back.center, box.center, atol=1e-9)
        assert np.allclose(back.size, box.size, atol=1e-9)
        assert np.allclose(back.matrix, box.matrix, atol=1e-9)


def test_euler_identity_and_yaw():
    assert np.array_equal(euler_to_matrix(0, 0, 0), np.eye(3))
    r = euler_to_matrix(math.pi / 2, 0, 0)
    assert np.allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_pitch_is_nose_up():
    r = euler_to_matrix(0.0, 0.1, 0.0)
    assert r[2, 0] == pytest.approx(math.sin(0.1))


def test_euler_round_trip_random():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        yaw, roll = rng.uniform(-math.pi, math.pi, 2)
        pitch = rng.uniform(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3)
        r = euler_to_matrix(yaw, pitch, roll)
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-12
        assert np.allclose(euler_to_matrix(*matrix_to_euler(r)), r, atol=1e-9)
        y2, p2, r2 = matrix_to_euler(r)
        assert abs(y2 - yaw) < 1e-9 and abs(p2 - pitch) < 1e-9 and abs(r2 - roll) < 1e-9


def test_gimbal_lock_flagged():
    r = euler_to_matrix(0.3, math.pi / 2, 0.2)
    with pytest.warns(GimbalLockWarning):
        yaw, pitch, roll = matrix_to_euler(r)
    assert roll == 0.0
    assert pitch == pytest.approx(math.pi / 2)
    assert np.allclose(euler_to_matrix(yaw, pitch, roll), r, atol=1e-9)


def test_no_warning_away_from_lock():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        matrix_to_euler(euler_to_matrix(0.1, 0.2, 0.3))


def test_invalid_types():
    with pytest.raises(GeometryError):
        Box2D(10, 0, 5, 4)
    with pytest.raises(GeometryError):
        Box3D((0, 0, 0), (1, -1, 1), (0, 0, 0))
    with pytest.raises(GeometryError):
        CameraModel(-1.0, 1.0, 0, 0, 10, 10, np.eye(3), np.zeros(3))
    with pytest.raises(GeometryError):
        CameraModel(1.0, 1.0, 0, 0, 10, 10, np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_from_pose_rotation_valid():
    cam = CameraModel.from_pose((3.0, 4.0, 11.0), 0.7, math.radians(6))
    assert is_rotation(cam.rotation, 1e-12)
    assert np.allclose(cam.center, (3.0, 4.0, 11.0))


def test_camera_file_round_trip(tmp_path):
    cam = CameraModel.from_pose((3.0, -9.0, 11.0), 0.09, math.radians(6))
    save_camera(cam, tmp_path / "c.json")
    back = load_camera(tmp_path / "c.json")
    assert np.array_equal(back.rotation, cam.rotation)
    assert np.array_equal(back.translation, cam.translation)
    assert (back.fx, back.fy, back.cx, back.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)


def test_camera_file_rejects_unknown_major(tmp_path):
    import json

    cam = CameraModel.from_pose((0, 0, 11.0), 0.0, 0.1)
    d = cam.to_dict()
    d["version"] = "2.0"
    (tmp_path / "c.json").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        load_camera(tmp_path / "c.json")
