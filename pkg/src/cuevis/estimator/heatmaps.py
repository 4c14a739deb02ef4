"""Keypoint heatmap targets and peak extraction.

Heatmaps live at 1/4 of the image resolution. A keypoint with continuous
image coordinates (u, v) sits at (u/4, v/4) in heatmap coordinates, where
heatmap pixel (a, b) covers [a, a+1) x [b, b+1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cuevis.geometry import CameraIntrinsics, Pose, project_points
from cuevis.scene.spacecraft import KEYPOINTS

DEFAULT_SIGMA_PX = 2.0
DEFAULT_STRIDE = 4
CONFIDENCE_THRESHOLD = 0.3


def heatmap_shape(intrinsics: CameraIntrinsics, stride: int = DEFAULT_STRIDE) -> tuple:
    return (intrinsics.height // stride, intrinsics.width // stride)


def keypoint_targets(uv: np.ndarray, in_frame: np.ndarray, shape: tuple, sigma_px: float, stride: int) -> np.ndarray:
    """Gaussian stack (K, h, w) for image-space points ``uv`` (K, 2)."""
    h, w = shape
    centers = np.asarray(uv, dtype=np.float64) / stride
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    gx = np.exp(-((xs[None, :] - centers[:, :1]) ** 2) / (2 * sigma_px**2))  # (K, w)
    gy = np.exp(-((ys[None, :] - centers[:, 1:]) ** 2) / (2 * sigma_px**2))  # (K, h)
    maps = gy[:, :, None] * gx[:, None, :]
    peak = maps.reshape(len(maps), -1).max(axis=1)
    ok = np.asarray(in_frame, dtype=bool) & (peak > 0)
    maps[ok] /= peak[ok, None, None]
    maps[~ok] = 0.0
    return maps


def target_heatmaps(
    pose: Pose,
    intrinsics: CameraIntrinsics,
    keypoints=KEYPOINTS,
    sigma_px: float = DEFAULT_SIGMA_PX,
    stride: int = DEFAULT_STRIDE,
) -> np.ndarray:
    """One unnormalised Gaussian per keypoint with its maximum scaled to 1.

    Channels of keypoints that project outside the image (or behind the
    camera) are all zero.
    """
    if not sigma_px > 0:
        raise ValueError(f"sigma_px must be positive, got {sigma_px}")
    kp = np.asarray(keypoints, dtype=np.float64)
    uv = project_points(pose, intrinsics, kp)
    z = pose.transform(kp)[:, 2]
    inside = (
        (z > 0)
        & (uv[:, 0] >= 0)
        & (uv[:, 0] < intrinsics.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < intrinsics.height)
    )
    return keypoint_targets(uv, inside, heatmap_shape(intrinsics, stride), sigma_px, stride)


def batch_target_heatmaps(poses, intrinsics: CameraIntrinsics, sigma_px: float = DEFAULT_SIGMA_PX, dtype=np.float32):
    return np.stack([target_heatmaps(p, intrinsics, sigma_px=sigma_px) for p in poses]).astype(dtype)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Detections:
    uv: np.ndarray  # (K, 2) continuous image coordinates
    confidence: np.ndarray  # (K,) in (0, 1)

    def usable(self, threshold: float = CONFIDENCE_THRESHOLD) -> np.ndarray:
        return self.confidence > threshold


def _parabola_offset(left, mid, right):
    denom = left - 2 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom < 0, 0.5 * (left - right) / denom, 0.0)
    return np.clip(off, -0.5, 0.5)


def extract_peaks(heatmaps: np.ndarray, stride: int = DEFAULT_STRIDE, floor: float = 1e-4) -> Detections:
    """Sub-pixel peaks of a (K, h, w) stack.

    The integer argmax is refined with a 3-point parabola through the log of
    the (floored) values along each axis, which is exact for a sampled
    Gaussian. Confidence is the sigmoid of the channel maximum.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    if hm.ndim != 3:
        raise ValueError(f"expected a (K, h, w) stack, got {hm.shape}")
    K, h, w = hm.shape
    flat = hm.reshape(K, -1)
    idx = flat.argmax(axis=1)
    b, a = np.divmod(idx, w)
    peak = flat[np.arange(K), idx]
    logs = np.log(np.maximum(hm, floor))
    k = np.arange(K)
    lx = logs[k, b, np.maximum(a - 1, 0)]
    rx = logs[k, b, np.minimum(a + 1, w - 1)]
    ly = logs[k, np.maximum(b - 1, 0), a]
    ry = logs[k, np.minimum(b + 1, h - 1), a]
    mid = logs[k, b, a]
    dx = np.where((a > 0) & (a < w - 1), _parabola_offset(lx, mid, rx), 0.0)
    dy = np.where((b > 0) & (b < h - 1), _parabola_offset(ly, mid, ry), 0.0)
    uv = np.stack([(a + 0.5 + dx) * stride, (b + 0.5 + dy) * stride], axis=1)
    return Detections(uv, _sigmoid(peak))
