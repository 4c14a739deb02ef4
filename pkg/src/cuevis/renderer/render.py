"""Differentiable volume rendering of the field."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from cuevis.autodiff import Tensor, is_grad_enabled, no_grad, ops
from cuevis.geometry import CameraIntrinsics, Pose, ray_bundle
from cuevis.renderer.field import FieldParams, field_eval
from cuevis.renderer.sampler import SampleBatch, SamplerParams, sample_rays

DEFAULT_CHUNK = 8192


def composite(rgb: Tensor, sigma: Tensor, deltas) -> tuple:
    """Alpha-composite samples front to back onto black.

    ``rgb`` (R, S, 3), ``sigma`` (R, S), ``deltas`` (R, S) array.
    Returns ``(color (R, 3), weights (R, S))``.
    """
    tau = ops.mul(sigma, np.asarray(deltas, dtype=sigma.dtype))
    alpha = ops.sub(1.0, ops.exp(ops.neg(tau)))
    trans = ops.exp(ops.neg(ops.cumsum(tau, axis=1, exclusive=True)))
    weights = ops.mul(trans, alpha)
    R, S = weights.shape
    color = ops.sum(ops.mul(ops.reshape(weights, (R, S, 1)), rgb), axis=1)
    return color, weights


@dataclass
class RayRender:
    color: Tensor  # (N, 3), one row per input ray, black for misses
    weights: Optional[np.ndarray]  # (R, S) for the rays that hit
    batch: SampleBatch


def _render_batch(batch: SampleBatch, params: FieldParams):
    R, S = batch.t.shape
    dirs = np.repeat(batch.dirs, S, axis=0)
    rgb, sigma = field_eval(batch.positions.reshape(-1, 3), dirs, params)
    return composite(ops.reshape(rgb, (R, S, 3)), ops.reshape(sigma, (R, S)), batch.deltas)


def _subset(batch: SampleBatch, lo: int, hi: int) -> SampleBatch:
    return SampleBatch(
        batch.t[lo:hi], batch.deltas[lo:hi], batch.positions[lo:hi], batch.dirs[lo:hi], batch.ray_index[lo:hi], hi - lo
    )


def render_rays(
    origins,
    dirs,
    params: FieldParams,
    sampler: SamplerParams,
    rng: Optional[np.random.Generator] = None,
    chunk: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> RayRender:
    """Render arbitrary rays (target frame).

    Rays are cut into fixed chunks of ``chunk`` rays; with gradients off
    the chunks may run on ``threads`` workers, and since chunk boundaries
    do not depend on the worker count the result is identical.
    With gradients on everything runs on the calling thread so the graph,
    and with it the gradient accumulation order, is fixed.
    """
    batch = sample_rays(origins, dirs, sampler, rng)
    n, dtype = batch.n_rays, params.dtype
    if len(batch) == 0:
        return RayRender(Tensor(np.zeros((n, 3), dtype=dtype)), np.zeros((0, sampler.n_samples)), batch)

    bounds = [(i, min(i + chunk, len(batch))) for i in range(0, len(batch), chunk)]
    if is_grad_enabled():
        parts = [_render_batch(_subset(batch, lo, hi), params) for lo, hi in bounds]
    else:

        def work(b):
            with no_grad():
                return _render_batch(_subset(batch, *b), params)

        if threads > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(work, bounds))
        else:
            parts = [work(b) for b in bounds]
    colors = parts[0][0] if len(parts) == 1 else ops.concatenate([p[0] for p in parts], axis=0)
    weights = np.concatenate([p[1].data for p in parts], axis=0)

    # scatter hit rows back to ray order; misses read the zero row
    index = np.full(n, len(batch), dtype=np.intp)
    index[batch.ray_index] = np.arange(len(batch))
    padded = ops.concatenate([colors, Tensor(np.zeros((1, 3), dtype=dtype))], axis=0)
    return RayRender(ops.gather(padded, index, axis=0), weights, batch)


def render_pixels(
    pose: Pose,
    intrinsics: CameraIntrinsics,
    pixels,
    params: FieldParams,
    sampler: SamplerParams,
    rng: Optional[np.random.Generator] = None,
    threads: int = 1,
) -> Tensor:
    """Colours of the listed (column, row) pixels, shape (P, 3)."""
    pixels = np.asarray(pixels, dtype=np.intp).reshape(-1, 2)
    if len(pixels) == 0:
        return Tensor(np.zeros((0, 3), dtype=params.dtype))
    origins, dirs = ray_bundle(pose, intrinsics, pixels)
    return render_rays(origins, dirs, params, sampler, rng, threads=threads).color


def mask_pixels(mask) -> np.ndarray:
    """(column, row) pairs of a boolean (H, W) mask in row-major order."""
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    return np.stack([cols, rows], axis=1)


def render_image(
    pose: Pose,
    intrinsics: CameraIntrinsics,
    params: FieldParams,
    sampler: SamplerParams,
    mask="all",
    rng: Optional[np.random.Generator] = None,
    threads: int = 1,
) -> Tensor:
    """(H, W, 3) image; pixels outside ``mask`` are exactly black."""
    H, W = intrinsics.height, intrinsics.width
    if isinstance(mask, str):
        if mask != "all":
            raise ValueError(f"mask must be a boolean array or 'all', got {mask!r}")
        mask = np.ones((H, W), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (H, W):
        raise ValueError(f"mask shape {mask.shape} does not match the {H}x{W} camera")
    pixels = mask_pixels(mask)
    colors = render_pixels(pose, intrinsics, pixels, params, sampler, rng, threads)
    index = np.full(H * W, len(pixels), dtype=np.intp)
    index[pixels[:, 1] * W + pixels[:, 0]] = np.arange(len(pixels))
    padded = ops.concatenate([colors, Tensor(np.zeros((1, 3), dtype=params.dtype))], axis=0)
    return ops.reshape(ops.gather(padded, index, axis=0), (H, W, 3))


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak**2 / mse)
