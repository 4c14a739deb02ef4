import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cuevis.geometry import (
    DEFAULT_INTRINSICS,
    CameraIntrinsics,
    Pose,
    PoseError,
    Quaternion,
    angular_error,
    generate_rays,
    project_points,
    quaternion_multiply,
    ray_bundle,
    translation_error,
)


def random_pose(rng, z=(4.0, 12.0)):
    return Pose(Quaternion.random(rng), (rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(*z)))


def test_quaternion_constructor_normalises():
    q = Quaternion(2.0, 0.0, 0.0, 0.0)
    assert np.linalg.norm(q.as_array()) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        Quaternion(0, 0, 0, 0)


def test_quaternion_matrix_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = Quaternion.random(rng)
        R = q.as_matrix()
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        back = Quaternion.from_matrix(R)
        assert angular_error(back, q) < 1e-6


def test_hamilton_product_composes_rotations():
    rng = np.random.default_rng(1)
    a, b = Quaternion.random(rng), Quaternion.random(rng)
    np.testing.assert_allclose((a * b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)
    np.testing.assert_allclose(quaternion_multiply(a.as_array(), a.conjugate().as_array()), [1, 0, 0, 0], atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 4, 1, 4, 4)


def test_principal_point_ray_is_optical_axis():
    K = CameraIntrinsics(100, 100, 2, 3, 6, 8)
    (ray,) = generate_rays(Pose(Quaternion.identity(), (0, 0, 5)), K, [(2, 3)])
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-15)


def test_one_focal_length_offset_is_45_degrees():
    K = CameraIntrinsics(2, 2, 1, 1, 4, 4)
    (ray,) = generate_rays(Pose(Quaternion.identity(), (0, 0, 5)), K, [(3, 1)])
    np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / np.sqrt(2), atol=1e-15)


def test_ray_origin_is_camera_center():
    rng = np.random.default_rng(2)
    pose = random_pose(rng)
    origins, _ = ray_bundle(pose, DEFAULT_INTRINSICS, [(0, 0)])
    np.testing.assert_allclose(pose.transform(origins), [[0, 0, 0]], atol=1e-12)


def test_rays_round_trip_through_projection_4x4():
    rng = np.random.default_rng(3)
    K = CameraIntrinsics(5.0, 6.0, 1.5, 2.0, 4, 4)
    pose = random_pose(rng)
    pixels = K.all_pixels()
    for ray, px in zip(generate_rays(pose, K, pixels), pixels):
        uv = project_points(pose, K, ray.at(3.7))
        np.testing.assert_allclose(uv[0], px + 0.5, atol=1e-9)


def test_rays_round_trip_100_random_poses():
    rng = np.random.default_rng(4)
    K = DEFAULT_INTRINSICS
    for _ in range(100):
        pose = random_pose(rng)
        pixels = np.stack([rng.integers(0, K.width, 20), rng.integers(0, K.height, 20)], axis=1)
        origins, dirs = ray_bundle(pose, K, pixels)
        depth = rng.uniform(0.5, 20, (20, 1))
        uv = project_points(pose, K, origins + depth * dirs)
        assert np.abs(uv - (pixels + 0.5)).max() < 1e-9


def test_rays_are_unit():
    rng = np.random.default_rng(5)
    _, dirs = ray_bundle(random_pose(rng), DEFAULT_INTRINSICS, DEFAULT_INTRINSICS.all_pixels())
    assert np.abs(np.linalg.norm(dirs, axis=1) - 1).max() < 1e-9


def test_out_of_bounds_pixel_rejected():
    with pytest.raises(ValueError, match="outside"):
        ray_bundle(Pose(Quaternion.identity(), (0, 0, 1)), DEFAULT_INTRINSICS, [(192, 0)])
    with pytest.raises(ValueError, match="outside"):
        ray_bundle(Pose(Quaternion.identity(), (0, 0, 1)), DEFAULT_INTRINSICS, [(0, -1)])


def test_scaled_intrinsics_keep_projection_consistent():
    rng = np.random.default_rng(6)
    pose = random_pose(rng)
    K = DEFAULT_INTRINSICS
    half = K.scaled(0.5)
    assert (half.width, half.height) == (96, 64)
    pts = rng.uniform(-1, 1, (10, 3))
    np.testing.assert_allclose(project_points(pose, half, pts), project_points(pose, K, pts) / 2, atol=1e-12)


# -- metrics -------------------------------------------------------------------

def test_angular_error_examples():
    q = Quaternion.random(np.random.default_rng(7))
    assert angular_error(q, q) == pytest.approx(0.0, abs=1e-5)
    assert angular_error(-q, q) == pytest.approx(0.0, abs=1e-5)
    quarter = Quaternion(np.sqrt(2) / 2, 0, 0, np.sqrt(2) / 2)
    assert angular_error(quarter, Quaternion.identity()) == pytest.approx(90.0, abs=1e-9)


def test_angular_error_rejects_non_unit():
    with pytest.raises(ValueError):
        angular_error(np.array([1.0, 1.0, 0, 0]), np.array([1.0, 0, 0, 0]))


def test_angular_error_symmetry_and_sign_invariance():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        a, b = Quaternion.random(rng), Quaternion.random(rng)
        e = angular_error(a, b)
        assert 0 <= e <= 180
        assert e == pytest.approx(angular_error(b, a), abs=1e-9)
        assert e == pytest.approx(angular_error(-a, b), abs=1e-9)


def test_angular_error_matches_rotation_matrix_angle():
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b = Quaternion.random(rng), Quaternion.random(rng)
        R = a.as_matrix().T @ b.as_matrix()
        ref = np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1)))
        assert angular_error(a, b) == pytest.approx(ref, abs=1e-5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_angular_error_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Quaternion.random(rng) for _ in range(3))
    assert angular_error(a, c) <= angular_error(a, b) + angular_error(b, c) + 1e-6


def test_translation_error_examples():
    assert translation_error([1, 2, 3], [1, 2, 3]) == 0.0
    assert translation_error([0, 0, 11], [0, 0, 10]) == pytest.approx(1.0)
    rng = np.random.default_rng(10)
    for _ in range(20):
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        ref = 0.0
        for k in range(3):
            ref += (a[k] - b[k]) ** 2
        assert translation_error(a, b) == pytest.approx(ref**0.5, rel=1e-12)


def test_pose_error_bounds():
    rng = np.random.default_rng(11)
    a, b = random_pose(rng), random_pose(rng)
    err = PoseError.between(a, b)
    assert 0 <= err.angular_deg <= 180 and err.translation_m >= 0
