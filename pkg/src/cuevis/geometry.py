"""Pose algebra, pinhole camera and ray generation.

Conventions
-----------
* Quaternions are scalar-first ``(w, x, y, z)`` and rotate target-frame
  vectors into the camera frame: ``X_cam = R(q) @ X_target + t``.
* Camera axes: +z forward, +x right, +y down.
* Pixel ``(i, j)`` is column ``i``, row ``j``; it covers ``[i, i+1) x [j, j+1)``
  in continuous image coordinates and its centre is ``(i + 0.5, j + 0.5)``.
* ``cx, cy`` are given in pixel-index units (a ray through pixel ``(cx, cy)``
  is the optical axis), so the principal point sits at ``(cx + 0.5, cy + 0.5)``
  in continuous coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion; the constructor normalises its input."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        v = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ValueError(f"cannot build a unit quaternion from {v}")
        for name, val in zip("wxyz", v / n):
            object.__setattr__(self, name, float(val))

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=np.float64).reshape(4)
        return cls(*q)

    @classmethod
    def from_matrix(cls, R) -> "Quaternion":
        return cls.from_array(matrix_to_quaternion(R))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        return cls(np.cos(angle / 2), *(np.sin(angle / 2) * axis))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Quaternion":
        """Uniformly distributed over SO(3)."""
        while True:
            v = rng.standard_normal(4)
            n = np.linalg.norm(v)
            if n > 1e-12:
                return cls(*(v / n))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def as_matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.as_array())

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quaternion_multiply(self.as_array(), other.as_array()))

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)


def quaternion_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` (rotation ``b`` first, then ``a``)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2 * np.sqrt(tr + 1)
        q = [s / 4, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2 * np.sqrt(1 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, s / 4, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2 * np.sqrt(1 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, s / 4, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2 * np.sqrt(1 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, s / 4]
    q = np.array(q)
    return q / np.linalg.norm(q)


def rotvec_to_matrix(v) -> np.ndarray:
    """Rodrigues' formula."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v)
    K = skew(v)
    if theta < 1e-12:
        return np.eye(3) + K
    K = K / theta
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Target pose in the camera frame (orientation + translation in metres)."""

    orientation: Quaternion
    translation: tuple

    def __post_init__(self):
        t = tuple(float(v) for v in np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_arrays(cls, q, t) -> "Pose":
        return cls(Quaternion.from_array(q), tuple(np.asarray(t, dtype=np.float64)))

    @property
    def q(self) -> np.ndarray:
        return self.orientation.as_array()

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    @property
    def rotation(self) -> np.ndarray:
        return self.orientation.as_matrix()

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the target frame."""
        return -self.rotation.T @ self.t

    def transform(self, points) -> np.ndarray:
        """Target-frame points (N, 3) to camera frame."""
        return np.asarray(points) @ self.rotation.T + self.t


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        """OpenCV-style K (pixel centres at integer coordinates)."""
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``factor`` (e.g. 0.5 halves it)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            w,
            h,
        )

    def all_pixels(self) -> np.ndarray:
        """Every pixel as (i, j), row-major (all columns of row 0 first)."""
        jj, ii = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([ii.ravel(), jj.ravel()], axis=1)


# SPEED+ camera field of view, at 192 x 128.
DEFAULT_INTRINSICS = CameraIntrinsics(fx=300.0, fy=300.0, cx=95.5, cy=63.5, width=192, height=128)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray = field(repr=False)
    direction: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def _check_pixels(pixels, intrinsics: CameraIntrinsics) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        return pixels.reshape(0, 2).astype(np.int64)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError(f"pixels must be (N, 2), got {pixels.shape}")
    i, j = pixels[:, 0], pixels[:, 1]
    bad = (i < 0) | (i >= intrinsics.width) | (j < 0) | (j >= intrinsics.height)
    if bad.any():
        raise ValueError(
            f"pixel {tuple(pixels[np.argmax(bad)])} outside {intrinsics.width}x{intrinsics.height} image"
        )
    return pixels


def ray_bundle(pose: Pose, intrinsics: CameraIntrinsics, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ray generation: ``(origins, directions)`` in the target frame."""
    pixels = _check_pixels(pixels, intrinsics)
    n = len(pixels)
    d_cam = np.empty((n, 3))
    d_cam[:, 0] = (pixels[:, 0] - intrinsics.cx) / intrinsics.fx
    d_cam[:, 1] = (pixels[:, 1] - intrinsics.cy) / intrinsics.fy
    d_cam[:, 2] = 1.0
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    R = pose.rotation
    dirs = d_cam @ R  # rows of R^T d
    origins = np.broadcast_to(pose.camera_center(), (n, 3)).copy()
    return origins, dirs


def generate_rays(pose: Pose, intrinsics: CameraIntrinsics, pixels) -> list:
    """One :class:`Ray` per requested pixel, through the pixel centre."""
    origins, dirs = ray_bundle(pose, intrinsics, pixels)
    return [Ray(o, d) for o, d in zip(origins, dirs)]


def project_points(pose: Pose, intrinsics: CameraIntrinsics, points) -> np.ndarray:
    """Continuous image coordinates ``(u, v)`` of target-frame points."""
    Xc = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    u = intrinsics.fx * Xc[:, 0] / Xc[:, 2] + intrinsics.cx + 0.5
    v = intrinsics.fy * Xc[:, 1] / Xc[:, 2] + intrinsics.cy + 0.5
    return np.stack([u, v], axis=1)


def pixel_centers(pixels) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) + 0.5


# -- metrics -----------------------------------------------------------------

def _unit(q, name: str) -> np.ndarray:
    if isinstance(q, Quaternion):
        return q.as_array()
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1) > UNIT_TOL):
        raise ValueError(f"{name} is not a unit quaternion (norm {n})")
    return q


def angular_error(q_hat, q) -> float:
    """Geodesic rotation distance in degrees, ``2 acos |<q_hat, q>|``."""
    a = _unit(q_hat, "q_hat")
    b = _unit(q, "q")
    dot = np.clip(np.abs(np.sum(a * b, axis=-1)), -1.0, 1.0)
    out = np.degrees(2 * np.arccos(dot))
    return float(out) if np.ndim(out) == 0 else out


def translation_error(t_hat, t) -> float:
    """Euclidean distance in metres."""
    d = np.asarray(t_hat, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    out = np.sqrt(np.sum(d * d, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PoseError:
    angular_deg: float
    translation_m: float

    def __post_init__(self):
        if not (0 <= self.angular_deg <= 180 + 1e-9) or self.translation_m < 0:
            raise ValueError(f"invalid pose error ({self.angular_deg}, {self.translation_m})")

    @classmethod
    def between(cls, pred: Pose, label: Pose) -> "PoseError":
        return cls(angular_error(pred.orientation, label.orientation), translation_error(pred.t, label.t))


def poses_to_arrays(poses: Iterable[Pose]) -> tuple[np.ndarray, np.ndarray]:
    poses = list(poses)
    return np.array([p.q for p in poses]), np.array([p.t for p in poses])


def arrays_to_poses(q: Sequence, t: Sequence) -> list:
    return [Pose.from_arrays(qq, tt) for qq, tt in zip(q, t)]
