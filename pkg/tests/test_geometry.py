import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sdfinv.autodiff as ad
from sdfinv.geometry import (Camera, InvalidPoseError, PoseParams,
                             camera_to_pose, generate_rays, look_at_pose,
                             matrix_to_quaternion, perturb_quaternion,
                             pixel_grid, pose_to_camera, project_points,
                             quaternion_multiply, quaternion_to_matrix,
                             ray_cube_intersect, rotation_error)

from helpers import check_gradients

IDENTITY = PoseParams(np.array([1.0, 0, 0, 0]), 1.0, np.zeros(2), 0.0)


def test_identity_pose_translation_and_focal():
    cam = pose_to_camera(IDENTITY)
    view = cam.view_numpy()
    assert cam.focal_numpy() == pytest.approx(2.0)        # 1 + exp(0)
    assert np.allclose(view[:3, 3], [0, 0, 2])
    assert np.allclose(view[:3, :3], np.eye(3))


def test_scaled_pose_translation():
    p = PoseParams(np.array([1.0, 0, 0, 0]), 2.0, np.array([1.0, 0.0]), 0.0)
    cam = pose_to_camera(p)
    assert np.allclose(cam.view_numpy()[:3, 3], [0.5, 0.0, 1.0])
    assert cam.focal_numpy() == pytest.approx(2.0)


def test_pose_to_camera_matches_direct_composition():
    rng = np.random.default_rng(7)
    for _ in range(10):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        p = PoseParams(q, rng.uniform(0.5, 2.0), rng.standard_normal(2) * 0.1,
                       rng.uniform(-0.5, 1.0))
        cam = pose_to_camera(p)
        pts = rng.uniform(-0.5, 0.5, (20, 3))
        px_cam, _ = project_points(pts, p)
        # direct composition of R, t3, f
        view = cam.view_numpy()
        f = cam.focal_numpy()
        cam_pts = pts @ view[:3, :3].T + view[:3, 3]
        px_direct = f * cam_pts[:, :2] / cam_pts[:, 2:3]
        assert np.max(np.abs(px_cam - px_direct)) < 1e-10


def test_invalid_scale_raises():
    with pytest.raises(InvalidPoseError):
        pose_to_camera(PoseParams(np.array([1.0, 0, 0, 0]), -0.2,
                                  np.zeros(2), 0.0))


def test_rotation_error_identity_and_antipodal():
    q = np.array([0.3, 0.5, -0.2, 0.7])
    q /= np.linalg.norm(q)
    assert rotation_error(q, q) == pytest.approx(0.0, abs=1e-9)
    assert rotation_error(q, -q) == pytest.approx(0.0, abs=1e-9)


def test_rotation_error_90_degrees_matches_matrix_angle():
    qz = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    qi = np.array([1.0, 0, 0, 0])
    assert rotation_error(qz, qi) == pytest.approx(90.0, abs=1e-9)
    R = quaternion_to_matrix(ad.constant(qz)).value
    angle = np.degrees(np.arccos((np.trace(R) - 1) / 2))
    assert angle == pytest.approx(90.0, abs=1e-9)


def test_rotation_error_warns_on_non_unit():
    with pytest.warns(UserWarning):
        rotation_error(np.array([2.0, 0, 0, 0]), np.array([1.0, 0, 0, 0]))


def _random_unit_quaternion(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rotation_error_symmetric_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (_random_unit_quaternion(rng) for _ in range(3))
    ab, ba = rotation_error(a, b), rotation_error(b, a)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert rotation_error(a, c) <= ab + rotation_error(b, c) + 1e-9


def test_center_pixel_is_camera_forward():
    pose = look_at_pose(40.0, 25.0, 2.5)
    cam = pose_to_camera(pose)
    rays = generate_rays(cam, 3, 3)
    fwd = cam.view_numpy()[2, :3]
    center = rays.dirs.value[4]
    assert np.allclose(center, fwd, atol=1e-12)


def test_weak_perspective_parallel_rays():
    pose = look_at_pose(10.0, 5.0, 3.0)
    cam = pose_to_camera(pose)
    cam = Camera(view=cam.view, focal=cam.focal,
                 projection_mode="weak-perspective", s=pose.s, t2=pose.t2)
    rays = generate_rays(cam, 4, 4)
    dirs = rays.dirs.value
    assert np.allclose(dirs, dirs[0], atol=1e-12)


def test_pinhole_direction_formula():
    pose = look_at_pose(0.0, 0.0, 2.7, focal=2.0)
    cam = pose_to_camera(pose)
    w = h = 4
    rays = generate_rays(cam, w, h)
    u, v = pixel_grid(w, h)
    R = cam.view_numpy()[:3, :3]
    f = cam.focal_numpy()
    expected = np.stack([u, v, np.full_like(u, f)], axis=1)
    expected /= np.linalg.norm(expected, axis=1, keepdims=True)
    assert np.allclose(rays.dirs.value, expected @ R, atol=1e-12)
    # the corner of the normalized image plane maps to (+-0.25, +-0.25, 1)
    corner = np.array([0.5, 0.5, f])
    assert np.allclose(corner / f, [0.25, 0.25, 1.0])


def test_pose_gradients_match_fd():
    def make(rng):
        q = _random_unit_quaternion(rng)
        pose = PoseParams(q, rng.uniform(0.6, 1.6),
                          rng.standard_normal(2) * 0.1,
                          rng.uniform(-0.3, 0.8)).parameters()
        pts = ad.constant(rng.uniform(-0.5, 0.5, (5, 3)))

        def build():
            cam = pose_to_camera(pose)
            view = cam.view
            R = view[:3, :3]
            t3 = ad.reshape(view[:3, 3], (1, 3))
            cam_pts = ad.add(ad.matmul(pts, ad.transpose(R)), t3)
            px = ad.mul(ad.div(cam_pts[:, 0:2], cam_pts[:, 2:3]), cam.focal)
            return ad.sum_(ad.mul(px, px))

        return build, pose.param_list()

    check_gradients(make, n_configs=15, rel=1e-4, h=1e-6)


def test_round_trip_pose_camera_pose():
    rng = np.random.default_rng(11)
    for _ in range(20):
        q = _random_unit_quaternion(rng)
        if q[0] < 0:
            q = -q
        p = PoseParams(q, rng.uniform(0.4, 2.5), rng.standard_normal(2) * 0.2,
                       rng.uniform(-1.0, 1.5))
        back = camera_to_pose(pose_to_camera(p))
        assert np.max(np.abs(back.q - p.q)) < 1e-8
        assert back.s == pytest.approx(p.s, abs=1e-8)
        assert np.max(np.abs(back.t2 - p.t2)) < 1e-8
        assert back.z0 == pytest.approx(p.z0, abs=1e-8)


def test_quaternion_matrix_round_trip():
    rng = np.random.default_rng(13)
    for _ in range(20):
        q = _random_unit_quaternion(rng)
        if q[0] < 0:
            q = -q
        R = quaternion_to_matrix(ad.constant(q)).value
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        assert np.max(np.abs(matrix_to_quaternion(R) - q)) < 1e-12


def test_perturb_quaternion_exact_angle():
    rng = np.random.default_rng(17)
    q = _random_unit_quaternion(rng)
    for angle in (1.0, 5.0, 10.0, 45.0):
        qp = perturb_quaternion(q, angle, rng)
        assert rotation_error(qp, q) == pytest.approx(angle, abs=1e-9)


def test_ray_cube_intersection():
    origins = ad.constant(np.array([[0.0, 0.0, -3.0], [5.0, 5.0, -3.0]]))
    dirs = ad.constant(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]))
    t0, t1, hit = ray_cube_intersect(origins, dirs)
    assert hit[0] and not hit[1]
    assert t0.value[0] == pytest.approx(2.0)
    assert t1.value[0] == pytest.approx(4.0)


def test_pose_vector_round_trip():
    p = look_at_pose(33.0, 12.0, 2.8, focal=2.2, t2=(0.01, -0.02))
    v = p.to_vector()
    back = PoseParams.from_vector(v)
    assert np.allclose(back.to_vector(), v)


def test_quaternion_multiply_composes_rotations():
    rng = np.random.default_rng(23)
    qa, qb = _random_unit_quaternion(rng), _random_unit_quaternion(rng)
    Ra = quaternion_to_matrix(ad.constant(qa)).value
    Rb = quaternion_to_matrix(ad.constant(qb)).value
    qc = quaternion_multiply(qa, qb)
    Rc = quaternion_to_matrix(ad.constant(qc)).value
    assert np.allclose(Rc, Ra @ Rb, atol=1e-12)
