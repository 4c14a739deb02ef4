"""Procedural stand-in for the target spacecraft.

A box body with two textured panels on its top face, three main antennas
hanging below three of the four bottom corners, and two thin side antennas on
the +y face. All coordinates are metres in the target frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BODY_SIZE = (0.8, 0.75, 0.32)
BODY_HALF = tuple(s / 2 for s in BODY_SIZE)

MAIN_ANTENNA_RADIUS = 0.01
SIDE_ANTENNA_RADIUS = 0.006


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    albedo: tuple


@dataclass(frozen=True)
class Quad:
    """Axis-aligned rectangle on the plane ``z = height``; two-sided."""

    height: float
    x_range: tuple
    y_range: tuple
    albedo: tuple
    cell: float = 0.09  # solar-cell pitch of the texture


@dataclass(frozen=True)
class Cylinder:
    start: tuple
    end: tuple
    radius: float
    albedo: tuple


def _body_corners() -> np.ndarray:
    hx, hy, hz = BODY_HALF
    return np.array(
        [[sx * hx, sy * hy, sz * hz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)], dtype=np.float64
    )


_HX, _HY, _HZ = BODY_HALF
_ANTENNA_BASES = np.array([[0.32, 0.30, -_HZ], [0.32, -0.30, -_HZ], [-0.32, 0.30, -_HZ]])
_ANTENNA_TIPS = np.array([[0.45, 0.42, -0.56], [0.45, -0.42, -0.56], [-0.45, 0.42, -0.56]])

KEYPOINT_NAMES = tuple(
    [f"corner_{i}" for i in range(8)] + ["antenna_tip_0", "antenna_tip_1", "antenna_tip_2"]
)
# 8 body corners followed by the 3 main-antenna tips.
KEYPOINTS = np.concatenate([_body_corners(), _ANTENNA_TIPS])


@dataclass(frozen=True)
class SpacecraftModel:
    body: tuple = (Box((0.0, 0.0, 0.0), BODY_HALF, (0.78, 0.68, 0.42)),)
    panels: tuple = (
        Quad(_HZ + 0.002, (-0.38, -0.02), (-0.355, 0.355), (0.18, 0.25, 0.62)),
        Quad(_HZ + 0.002, (0.02, 0.38), (-0.355, 0.18), (0.55, 0.60, 0.72)),
    )
    main_antennas: tuple = tuple(
        Cylinder(tuple(b), tuple(t), MAIN_ANTENNA_RADIUS, (0.92, 0.92, 0.92))
        for b, t in zip(_ANTENNA_BASES, _ANTENNA_TIPS)
    )
    side_antennas: tuple = (
        Cylinder((-0.22, _HY, 0.06), (-0.22, _HY + 0.24, 0.10), SIDE_ANTENNA_RADIUS, (0.95, 0.55, 0.25)),
        Cylinder((0.12, _HY, -0.05), (0.12, _HY + 0.18, -0.09), SIDE_ANTENNA_RADIUS, (0.95, 0.55, 0.25)),
    )
    keypoints: np.ndarray = field(default_factory=lambda: KEYPOINTS.copy(), compare=False)

    @classmethod
    def body_only(cls) -> "SpacecraftModel":
        return cls(panels=(), main_antennas=(), side_antennas=())

    @property
    def cylinders(self) -> tuple:
        return self.main_antennas + self.side_antennas

    def bounding_radius(self) -> float:
        pts = [KEYPOINTS]
        for c in self.cylinders:
            pts.append(np.array([c.start, c.end]))
        return float(np.linalg.norm(np.concatenate(pts), axis=1).max())
