"""Input checks shared by the estimator-style wrappers."""
from __future__ import annotations

import numpy as np

from cuevis.geometry import Pose, poses_to_arrays


def check_poses(X, name: str = "X") -> np.ndarray:
    """Poses as an (n, 7) float array [qw, qx, qy, qz, tx, ty, tz].

    Accepts such an array or a sequence of :class:`Pose`. Quaternions are
    normalised; zero quaternions and non-finite values are rejected.
    """
    if len(X) and isinstance(X[0], Pose):
        q, t = poses_to_arrays(X)
        X = np.concatenate([q, t], axis=1)
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise ValueError(f"{name} must have shape (n, 7) [q(4), t(3)], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    n = np.linalg.norm(arr[:, :4], axis=1)
    if np.any(n < 1e-12):
        raise ValueError(f"{name} contains a zero quaternion")
    arr = arr.copy()
    arr[:, :4] /= n[:, None]
    return arr


def pose_rows(X) -> list:
    arr = check_poses(X)
    return [Pose.from_arrays(r[:4], r[4:]) for r in arr]


def check_images(y, n=None, shape=None, name: str = "y") -> np.ndarray:
    """Images as float (n, H, W, 3) in [0, 1]; uint8 input is scaled by 1/255."""
    arr = np.asarray(y)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must be RGB images (n, H, W, 3), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise ValueError(f"float {name} must lie in [0, 1]")
    if n is not None and len(arr) != n:
        raise ValueError(f"{name} has {len(arr)} images but {n} poses were given")
    if shape is not None and arr.shape[1:3] != tuple(shape):
        raise ValueError(f"{name} images are {arr.shape[1:3]}, expected {tuple(shape)}")
    return arr


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
