"""Reference ray tracer for the procedural spacecraft (one primary ray per pixel)."""
from __future__ import annotations

import numpy as np

from cuevis.geometry import CameraIntrinsics, Pose, ray_bundle
from cuevis.scene.spacecraft import Box, Cylinder, Quad, SpacecraftModel

AMBIENT = 0.1
EPS = 1e-9


def _hit_box(o, d, box: Box):
    lo = np.asarray(box.center) - box.half
    hi = np.asarray(box.center) + box.half
    safe = np.where(np.abs(d) < EPS, EPS, d)
    t1 = (lo - o) / safe
    t2 = (hi - o) / safe
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_far >= t_near) & (t_near > EPS)
    axis = tmin.argmax(axis=1)
    normal = np.zeros_like(d)
    rows = np.arange(len(d))
    normal[rows, axis] = -np.sign(safe[rows, axis])
    return np.where(hit, t_near, np.inf), normal


def _hit_quad(o, d, quad: Quad):
    dz = np.where(np.abs(d[:, 2]) < EPS, EPS, d[:, 2])
    t = (quad.height - o[:, 2]) / dz
    p = o + t[:, None] * d
    inside = (
        (p[:, 0] >= quad.x_range[0]) & (p[:, 0] <= quad.x_range[1])
        & (p[:, 1] >= quad.y_range[0]) & (p[:, 1] <= quad.y_range[1])
    )
    hit = inside & (t > EPS)
    normal = np.zeros_like(d)
    normal[:, 2] = -np.sign(dz)
    return np.where(hit, t, np.inf), normal, p


def _hit_cylinder(o, d, cyl: Cylinder):
    a = np.asarray(cyl.start, dtype=np.float64)
    axis = np.asarray(cyl.end, dtype=np.float64) - a
    length = np.linalg.norm(axis)
    axis = axis / length
    oc = o - a
    d_perp = d - (d @ axis)[:, None] * axis
    oc_perp = oc - (oc @ axis)[:, None] * axis
    A = (d_perp * d_perp).sum(1)
    B = 2 * (d_perp * oc_perp).sum(1)
    C = (oc_perp * oc_perp).sum(1) - cyl.radius**2
    disc = B * B - 4 * A * C
    ok = (disc >= 0) & (A > EPS)
    sq = np.sqrt(np.where(ok, disc, 0))
    A_safe = np.where(A > EPS, A, 1)
    best = np.full(len(d), np.inf)
    for t in ((-B - sq) / (2 * A_safe), (-B + sq) / (2 * A_safe)):
        s = ((oc + t[:, None] * d) @ axis)
        valid = ok & (t > EPS) & (s >= 0) & (s <= length) & (t < best)
        best = np.where(valid, t, best)
    p = o + np.where(np.isfinite(best), best, 0)[:, None] * d
    s = (p - a) @ axis
    normal = p - (a + s[:, None] * axis)
    normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), EPS)
    return best, normal


def _panel_texture(quad: Quad, p: np.ndarray) -> np.ndarray:
    fx = np.mod(p[:, 0] - quad.x_range[0], quad.cell) / quad.cell
    fy = np.mod(p[:, 1] - quad.y_range[0], quad.cell) / quad.cell
    grid_line = (fx < 0.1) | (fy < 0.1)
    return np.where(grid_line, 0.45, 1.0)


def trace(origins: np.ndarray, dirs: np.ndarray, model: SpacecraftModel, light_target: np.ndarray):
    """Nearest hit and Lambertian shade for rays given in the target frame.

    Returns ``(rgb (N, 3), hit (N,), depth (N,))``; misses are black with
    infinite depth.
    """
    n = len(dirs)
    depth = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))

    def take(t, nrm, alb):
        closer = t < depth
        depth[closer] = t[closer]
        normal[closer] = nrm[closer]
        albedo[closer] = alb[closer] if np.ndim(alb) == 2 else alb

    for box in model.body:
        t, nrm = _hit_box(origins, dirs, box)
        take(t, nrm, np.asarray(box.albedo))
    for quad in model.panels:
        t, nrm, p = _hit_quad(origins, dirs, quad)
        take(t, nrm, _panel_texture(quad, p)[:, None] * np.asarray(quad.albedo))
    for cyl in model.cylinders:
        t, nrm = _hit_cylinder(origins, dirs, cyl)
        take(t, nrm, np.asarray(cyl.albedo))

    hit = np.isfinite(depth)
    # shade the side facing the camera
    facing = np.where(((normal * dirs).sum(1) > 0)[:, None], -normal, normal)
    lambert = np.maximum(0.0, facing @ light_target)
    rgb = np.clip((lambert + AMBIENT)[:, None] * albedo, 0.0, 1.0)
    rgb[~hit] = 0.0
    return rgb, hit, depth


def raytrace_reference(pose: Pose, intrinsics: CameraIntrinsics, model: SpacecraftModel, light_dir):
    """Render ``(image (H, W, 3) in [0, 1], mask (H, W) bool)``.

    ``light_dir`` points from the surface towards the light, in the camera
    frame.
    """
    pixels = intrinsics.all_pixels()
    origins, dirs = ray_bundle(pose, intrinsics, pixels)
    light = np.asarray(light_dir, dtype=np.float64)
    light = pose.rotation.T @ (light / np.linalg.norm(light))
    rgb, hit, _ = trace(origins, dirs, model, light)
    H, W = intrinsics.height, intrinsics.width
    return rgb.reshape(H, W, 3), hit.reshape(H, W)


def keypoint_visibility(pose: Pose, intrinsics: CameraIntrinsics, model: SpacecraftModel, tol: float = 0.02):
    """True where the keypoint is in frame and the first surface hit along
    the line of sight lies within ``tol`` metres of it."""
    from cuevis.geometry import project_points

    uv = project_points(pose, intrinsics, model.keypoints)
    in_frame = (uv[:, 0] >= 0) & (uv[:, 0] < intrinsics.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intrinsics.height)
    origin = pose.camera_center()
    to_kp = model.keypoints - origin
    dist = np.linalg.norm(to_kp, axis=1)
    dirs = to_kp / dist[:, None]
    _, hit, depth = trace(np.broadcast_to(origin, dirs.shape).copy(), dirs, model, np.array([0, 0, 1.0]))
    visible = in_frame & (~hit | (depth >= dist - tol))
    return visible & (pose.transform(model.keypoints)[:, 2] > 0)
