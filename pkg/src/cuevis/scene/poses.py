from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from cuevis.geometry import CameraIntrinsics, Pose, Quaternion, project_points
from cuevis.scene.spacecraft import KEYPOINTS


@dataclass(frozen=True)
class PoseRange:
    distance: tuple = (6.0, 14.0)
    margin_px: float = 10.0
    max_tries: int = 1000


class PoseSamplingError(RuntimeError):
    pass


def keypoints_in_frame(pose: Pose, intrinsics: CameraIntrinsics, margin: float, keypoints=KEYPOINTS) -> bool:
    if np.any(pose.transform(keypoints)[:, 2] <= 0):
        return False
    uv = project_points(pose, intrinsics, keypoints)
    return bool(
        np.all(uv[:, 0] >= margin) and np.all(uv[:, 0] <= intrinsics.width - margin)
        and np.all(uv[:, 1] >= margin) and np.all(uv[:, 1] <= intrinsics.height - margin)
    )


def sample_pose(rng: np.random.Generator, intrinsics: CameraIntrinsics, config: PoseRange = PoseRange()) -> Pose:
    """Uniform orientation, uniform depth, and an image-plane offset chosen so
    every keypoint lands at least ``margin_px`` inside the frame."""
    for _ in range(config.max_tries):
        q = Quaternion.random(rng)
        z = rng.uniform(*config.distance)
        u = rng.uniform(config.margin_px, intrinsics.width - config.margin_px)
        v = rng.uniform(config.margin_px, intrinsics.height - config.margin_px)
        x = (u - 0.5 - intrinsics.cx) / intrinsics.fx * z
        y = (v - 0.5 - intrinsics.cy) / intrinsics.fy * z
        pose = Pose(q, (x, y, z))
        if keypoints_in_frame(pose, intrinsics, config.margin_px):
            return pose
    raise PoseSamplingError(
        f"no pose with all keypoints {config.margin_px}px inside a {intrinsics.width}x{intrinsics.height} "
        f"frame after {config.max_tries} tries; widen the image or move the range out"
    )


def sample_light(rng: np.random.Generator, max_angle_deg: float = 60.0) -> np.ndarray:
    """Light direction (camera frame, surface-to-light) uniform over a cone
    around the direction back towards the camera."""
    cos_max = np.cos(np.radians(max_angle_deg))
    cos_a = rng.uniform(cos_max, 1.0)
    sin_a = np.sqrt(1 - cos_a**2)
    phi = rng.uniform(0, 2 * np.pi)
    return np.array([sin_a * np.cos(phi), sin_a * np.sin(phi), -cos_a])


EVAL_LIGHT = np.array([np.sin(np.radians(30)), 0.0, -np.cos(np.radians(30))])


def quaternion_from_unit_cube(u) -> Quaternion:
    """Shoemake's map from [0,1)^3 to uniformly distributed rotations."""
    u1, u2, u3 = u
    a, b = np.sqrt(1 - u1), np.sqrt(u1)
    return Quaternion(a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2), b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3))


def grid_poses(n: int = 32, distance: float = 10.0) -> list:
    """Fixed evaluation set: ``n`` Halton orientations, target on the optical
    axis at ``distance`` metres."""
    pts = qmc.Halton(d=3, scramble=False).random(n + 1)[1:]
    return [Pose(quaternion_from_unit_cube(u), (0.0, 0.0, distance)) for u in pts]


def named_pose_set(name: str) -> list:
    if name == "grid32":
        return grid_poses(32, 10.0)
    if name.startswith("grid") and name[4:].isdigit():
        return grid_poses(int(name[4:]), 10.0)
    raise ValueError(f"unknown pose set {name!r} (expected gridN, e.g. grid32)")
