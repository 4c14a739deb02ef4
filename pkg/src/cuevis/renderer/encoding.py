"""Position and direction encodings for the neural field."""
from __future__ import annotations

import numpy as np

from cuevis.autodiff import Tensor, ops

# axis pairs of the three feature planes, in the order xy, xz, yz
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
PLANE_NAMES = ("plane_xy", "plane_xz", "plane_yz")


def normalize_positions(points, aabb) -> np.ndarray:
    """Map world points into [0, 1]^3 of the box ``aabb = (lo, hi)``, clamped."""
    lo, hi = (np.asarray(a, dtype=np.float64) for a in aabb)
    return np.clip((np.asarray(points, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def plane_features(planes, unit_points) -> Tensor:
    """Hadamard product of bilinear samples from the three planes.

    ``planes`` are (R, R, F) tensors; ``unit_points`` is (N, 3) in [0, 1].
    Returns an (N, F) tensor.
    """
    if len(planes) != 3:
        raise ValueError(f"expected 3 planes, got {len(planes)}")
    p = np.asarray(unit_points)
    out = None
    for plane, (a, b) in zip(planes, PLANE_AXES):
        uv = p[:, [a, b]].astype(plane.dtype)
        f = ops.bilinear_sample(plane, uv)
        out = f if out is None else ops.mul(out, f)
    return out


def encode_position(points, planes, aabb) -> Tensor:
    return plane_features(planes, normalize_positions(points, aabb))


# real spherical-harmonic constants, no Condon-Shortley phase
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)


def sh_basis(dirs, degree: int = 2) -> np.ndarray:
    """Real SH basis up to ``degree`` (0, 1 or 2) for unit directions (N, 3).

    Ordering is by degree, then m = -l..l: [Y00, Y1-1, Y10, Y11, Y2-2, ...].
    """
    if degree not in (0, 1, 2):
        raise ValueError(f"sh degree must be 0, 1 or 2, got {degree}")
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [SH_C1 * y, SH_C1 * z, SH_C1 * x]
    if degree >= 2:
        a, b, c = SH_C2
        cols += [a * x * y, a * y * z, b * (3 * z * z - 1), a * x * z, c * (x * x - y * y)]
    return np.stack(cols, axis=1)


def angles_to_direction(theta, phi) -> np.ndarray:
    """Polar angle from +z and azimuth from +x to unit vectors (N, 3)."""
    theta, phi = np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def direction_to_angles(dirs) -> tuple:
    d = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    return theta, phi


def encode_direction(theta, phi, degree: int = 2) -> np.ndarray:
    return sh_basis(np.atleast_2d(angles_to_direction(theta, phi)), degree)
