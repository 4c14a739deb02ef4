"""Photometric pretraining of the field on posed images."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from cuevis.autodiff import Adam, backward, no_grad, ops
from cuevis.geometry import CameraIntrinsics, ray_bundle
from cuevis.renderer.field import FieldParams
from cuevis.renderer.render import psnr, render_image, render_rays
from cuevis.renderer.sampler import SamplerParams, ray_aabb


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch_rays: int = 1024
    lr_planes: float = 1e-2
    lr_mlp: float = 1e-3
    refresh_every: int = 100
    log_every: int = 50
    seed: int = 0

    def learning_rates(self) -> dict:
        return {"plane_": self.lr_planes, "density.": self.lr_mlp, "color.": self.lr_mlp}


@dataclass
class PretrainResult:
    params: FieldParams
    sampler: SamplerParams
    history: list = field(default_factory=list)


def _all_rays(poses, intrinsics: CameraIntrinsics):
    pixels = intrinsics.all_pixels()
    o, d = zip(*(ray_bundle(p, intrinsics, pixels) for p in poses))
    return np.concatenate(o), np.concatenate(d)


def photometric_pretrain(
    images,
    poses,
    intrinsics: CameraIntrinsics,
    params: FieldParams,
    sampler: SamplerParams,
    config: PretrainConfig = PretrainConfig(),
    callback: Optional[Callable] = None,
) -> PretrainResult:
    """Fit the field to ``images`` (N, H, W, 3) in [0, 1] seen from ``poses``.

    Each step draws ``batch_rays`` pixels uniformly from all images pooled
    together (only pixels whose ray crosses the scene box; the rest are
    black by construction) and takes one Adam step on the mean squared
    error. The occupancy grid is rebuilt from the field every
    ``refresh_every`` steps and once at the end. The inputs are not
    modified.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0 or len(images) != len(poses):
        raise ValueError(f"need a non-empty set of images and matching poses, got {len(images)} and {len(poses)}")
    if images.shape[1:3] != intrinsics.shape:
        raise ValueError(f"images are {images.shape[1:3]} but the camera is {intrinsics.shape}")
    params = params.copy()
    sampler = sampler.copy()
    result = PretrainResult(params, sampler)
    if config.steps <= 0:
        return result

    origins, dirs = _all_rays(poses, intrinsics)
    targets = images.reshape(-1, 3).astype(params.dtype)
    _, _, hit = ray_aabb(origins, dirs, params.aabb)
    pool = np.flatnonzero(hit)
    rng = np.random.default_rng(config.seed)
    opt = Adam(params.trainable_arrays(), lr=config.learning_rates())
    t0 = time.perf_counter()
    for step in range(config.steps):
        if step % config.refresh_every == 0:
            sampler = sampler.refreshed(params)
        idx = pool[rng.integers(0, len(pool), config.batch_rays)]
        params.zero_grad()
        out = render_rays(origins[idx], dirs[idx], params, sampler, rng)
        diff = ops.sub(out.color, targets[idx])
        loss = ops.mean(ops.mul(diff, diff))
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(
                f"pretraining diverged at step {step}: loss={value}; lower the learning rates "
                f"(planes {config.lr_planes}, mlp {config.lr_mlp})"
            )
        backward(loss)
        opt.step(params.grads())
        if step % config.log_every == 0 or step == config.steps - 1:
            rec = {"step": step, "loss": value, "wall_s": time.perf_counter() - t0}
            result.history.append(rec)
            if callback is not None:
                callback(rec)
    result.sampler = sampler.refreshed(params)
    return result


def render_views(poses, intrinsics: CameraIntrinsics, params: FieldParams, sampler: SamplerParams, threads: int = 1):
    """Full-frame renders, (N, H, W, 3) float arrays, deterministic sampling."""
    with no_grad():
        return np.stack([render_image(p, intrinsics, params, sampler, threads=threads).data for p in poses])


def heldout_psnr(images, poses, intrinsics, params, sampler, threads: int = 1) -> float:
    """Mean over views of the full-frame PSNR."""
    renders = render_views(poses, intrinsics, params, sampler, threads)
    return float(np.mean([psnr(r, np.asarray(im, dtype=np.float64)) for r, im in zip(renders, images)]))
