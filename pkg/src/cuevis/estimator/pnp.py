"""Confidence-weighted Levenberg-Marquardt PnP refinement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cuevis.geometry import CameraIntrinsics, Pose, Quaternion, matrix_to_quaternion, rotvec_to_matrix, skew
from cuevis.scene.spacecraft import KEYPOINTS

MIN_POINTS = 4


@dataclass
class PnPResult:
    pose: Pose
    costs: list = field(default_factory=list)  # cost after every accepted iterate, starting at init
    converged: bool = False
    iterations: int = 0
    n_used: int = 0
    fallback: bool = False

    @property
    def cost(self) -> float:
        return self.costs[-1] if self.costs else float("nan")


def _residuals(R, t, X, uv, sw, intrinsics):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    if np.any(z <= 1e-9):
        return None, Xc
    u = intrinsics.fx * Xc[:, 0] / z + intrinsics.cx + 0.5
    v = intrinsics.fy * Xc[:, 1] / z + intrinsics.cy + 0.5
    r = np.stack([u - uv[:, 0], v - uv[:, 1]], axis=1) * sw[:, None]
    return r.ravel(), Xc


def _jacobian(R, X, Xc, sw, intrinsics):
    """d residual / d (omega, dt) for the update R <- exp(omega) R, t <- t + dt."""
    n = len(X)
    x, y, z = Xc.T
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = intrinsics.fx / z
    dproj[:, 0, 2] = -intrinsics.fx * x / z**2
    dproj[:, 1, 1] = intrinsics.fy / z
    dproj[:, 1, 2] = -intrinsics.fy * y / z**2
    RX = X @ R.T
    dX = np.zeros((n, 3, 6))
    # -skew(RX) per point
    dX[:, 0, 1], dX[:, 0, 2] = RX[:, 2], -RX[:, 1]
    dX[:, 1, 0], dX[:, 1, 2] = -RX[:, 2], RX[:, 0]
    dX[:, 2, 0], dX[:, 2, 1] = RX[:, 1], -RX[:, 0]
    dX[:, :, 3:] = np.eye(3)
    J = np.einsum("nij,njk->nik", dproj, dX) * sw[:, None, None]
    return J.reshape(2 * n, 6)


def pnp_solve(
    uv,
    confidence,
    intrinsics: CameraIntrinsics,
    init: Pose,
    keypoints=KEYPOINTS,
    threshold: float = 0.3,
    max_iter: int = 100,
    tol: float = 1e-12,
) -> PnPResult:
    """Refine ``init`` to minimise the confidence-weighted squared reprojection error.

    ``uv`` are detected keypoints (K, 2) in continuous image coordinates and
    ``confidence`` their weights (K,). Points at or below ``threshold`` are
    dropped; with fewer than four left, ``init`` is returned with
    ``fallback=True``. A step is only accepted when it does not raise the
    cost, so ``costs`` is non-increasing.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    X = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    if not (len(uv) == len(conf) == len(X)):
        raise ValueError(f"got {len(uv)} detections, {len(conf)} confidences and {len(X)} keypoints")
    use = (conf > threshold) & np.all(np.isfinite(uv), axis=1)
    res = PnPResult(init, n_used=int(use.sum()))
    if res.n_used < MIN_POINTS:
        res.fallback = True
        return res
    X, uv, sw = X[use], uv[use], np.sqrt(conf[use])
    R, t = init.rotation, init.t
    r, Xc = _residuals(R, t, X, uv, sw, intrinsics)
    if r is None:
        res.fallback = True
        return res
    cost = 0.5 * float(r @ r)
    res.costs.append(cost)
    lam = 1e-3
    for it in range(max_iter):
        res.iterations = it + 1
        J = _jacobian(R, X, Xc, sw, intrinsics)
        H = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) < tol:
            res.converged = True
            break
        accepted = False
        while lam < 1e16:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            R_new = rotvec_to_matrix(step[:3]) @ R
            t_new = t + step[3:]
            r_new, Xc_new = _residuals(R_new, t_new, X, uv, sw, intrinsics)
            if r_new is not None:
                new_cost = 0.5 * float(r_new @ r_new)
                if new_cost <= cost:
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            res.converged = True  # no descent direction left at machine precision
            break
        small = np.linalg.norm(step) < 1e-12 * (1 + np.linalg.norm(t)) or cost - new_cost <= tol * max(cost, 1e-300)
        R, t, r, Xc, cost = R_new, t_new, r_new, Xc_new, new_cost
        res.costs.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if small:
            res.converged = True
            break
    res.pose = Pose(Quaternion.from_array(matrix_to_quaternion(R)), tuple(t))
    return res


def _cube_rotations() -> np.ndarray:
    """The 24 rotations mapping the coordinate axes onto themselves."""
    mats = []
    for perm in ((0, 1, 2), (1, 2, 0), (2, 0, 1), (1, 0, 2), (0, 2, 1), (2, 1, 0)):
        for signs in np.ndindex(2, 2, 2):
            M = np.zeros((3, 3))
            M[np.arange(3), perm] = 1.0 - 2.0 * np.array(signs)
            if np.linalg.det(M) > 0:
                mats.append(M)
    return np.array(mats)


CUBE_ROTATIONS = _cube_rotations()


def translation_from_detections(uv, intrinsics: CameraIntrinsics, keypoints=KEYPOINTS) -> np.ndarray:
    """Rough t from the detections' centroid and spread (weak perspective)."""
    uv = np.asarray(uv, dtype=np.float64)
    X = np.asarray(keypoints, dtype=np.float64)
    spread = np.sqrt(np.mean(np.sum((uv - uv.mean(0)) ** 2, axis=1)))
    radius = np.sqrt(np.mean(np.sum((X - X.mean(0)) ** 2, axis=1)))
    f = 0.5 * (intrinsics.fx + intrinsics.fy)
    z = f * radius / max(spread, 1e-6)
    c = uv.mean(0)
    return np.array([(c[0] - intrinsics.cx - 0.5) * z / intrinsics.fx, (c[1] - intrinsics.cy - 0.5) * z / intrinsics.fy, z])


def _trusted(res: PnPResult, uv, conf, use, t0, max_rms_px, min_spread_px) -> bool:
    if res.fallback:
        return False
    rms = np.sqrt(2.0 * res.cost / max(float(np.sum(conf[use])), 1e-12))
    pts = uv[use]
    spread = np.sqrt(np.mean(np.sum((pts - pts.mean(0)) ** 2, axis=1)))
    # detections piled onto one spot are fitted "well" by pushing the
    # object to infinity; the weak-perspective depth catches that
    depth_ratio = res.pose.t[2] / t0[2]
    return bool(np.isfinite(rms) and rms <= max_rms_px and spread >= min_spread_px and 1 / 3 <= depth_ratio <= 3)


def pnp_multistart(
    uv,
    confidence,
    intrinsics: CameraIntrinsics,
    init: Pose,
    keypoints=KEYPOINTS,
    threshold: float = 0.3,
    max_rms_px: float = 5.0,
    min_spread_px: float = 2.0,
    max_iter: int = 100,
    probe_iter: int = 30,
) -> PnPResult:
    """LM from ``init``, and if that fit is not trusted, from the 24
    axis-aligned orientations too; lowest cost wins.

    A poor pose-head orientation puts a single LM run in the wrong basin,
    so the extra starts use a translation guessed from the detections;
    each runs ``probe_iter`` iterations and the best is polished. A fit is
    trusted when its weighted RMS reprojection error is at most
    ``max_rms_px``, the detections span at least ``min_spread_px``, and
    the fitted depth is within 3x of the weak-perspective guess. With no
    trusted fit ``init`` comes back with ``fallback=True``.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    best = pnp_solve(uv, conf, intrinsics, init, keypoints, threshold, max_iter)
    if best.fallback:
        return best
    use = conf > threshold
    t0 = translation_from_detections(uv[use], intrinsics, np.asarray(keypoints)[use])
    if _trusted(best, uv, conf, use, t0, max_rms_px, min_spread_px):
        return best
    probe = None
    for R in CUBE_ROTATIONS:
        start = Pose(Quaternion.from_array(matrix_to_quaternion(R)), tuple(t0))
        res = pnp_solve(uv, conf, intrinsics, start, keypoints, threshold, probe_iter)
        if not res.fallback and (probe is None or res.cost < probe.cost):
            probe = res
    if probe is not None and probe.cost < best.cost:
        best = pnp_solve(uv, conf, intrinsics, probe.pose, keypoints, threshold, max_iter)
    if not _trusted(best, uv, conf, use, t0, max_rms_px, min_spread_px):
        return PnPResult(init, [best.cost], False, best.iterations, best.n_used, fallback=True)
    return best
