"""Estimator-style wrapper around the field + sampler pair."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from cuevis._validation import check_images, check_positive_int, pose_rows
from cuevis.autodiff import load_checkpoint, save_checkpoint
from cuevis.geometry import DEFAULT_INTRINSICS, CameraIntrinsics
from cuevis.renderer.field import DEFAULT_AABB, FieldParams
from cuevis.renderer.pretrain import PretrainConfig, heldout_psnr, photometric_pretrain, render_views
from cuevis.renderer.sampler import SamplerParams

NERF_INTRINSICS = DEFAULT_INTRINSICS.scaled(0.5)


def save_generator(path, params: FieldParams, sampler: SamplerParams, meta: Optional[dict] = None):
    """One checkpoint holding the field tensors and the occupancy grid."""
    tensors = dict(params.arrays())
    tensors.update(sampler.state())
    info = {
        "field": {"aabb": params.aabb, "sh_degree": params.sh_degree, "trainable": params.trainable},
        "sampler": sampler.meta(),
    }
    info.update(meta or {})
    return save_checkpoint(path, tensors, info)


def load_generator(path, dtype=np.float32) -> tuple:
    tensors, meta = load_checkpoint(path)
    info = meta.get("field", {})
    arrays = {k: v.astype(dtype) for k, v in tensors.items() if not k.startswith("sampler.")}
    params = FieldParams(arrays, info.get("aabb", DEFAULT_AABB), info.get("sh_degree", 2), info.get("trainable"))
    sampler = SamplerParams.from_state(tensors, meta["sampler"])
    return params, sampler, meta


class NeRFGenerator(BaseEstimator):
    """Pose -> image generator trained photometrically.

    ``fit(X, y)`` takes poses ``X`` as (n, 7) rows [q, t] (or Pose objects)
    and images ``y`` (n, H, W, 3) matching ``intrinsics``; ``predict(X)``
    renders full frames. Fitted attributes: ``field_params_``,
    ``sampler_``, ``history_``.
    """

    def __init__(
        self,
        intrinsics: CameraIntrinsics = NERF_INTRINSICS,
        resolution: int = 64,
        features: int = 16,
        hidden: int = 64,
        sh_degree: int = 2,
        grid_resolution: int = 32,
        n_coarse: int = 32,
        n_fine: int = 32,
        steps: int = 2000,
        batch_rays: int = 1024,
        lr_planes: float = 1e-2,
        lr_mlp: float = 1e-3,
        refresh_every: int = 100,
        random_state: int = 0,
        threads: int = 1,
    ):
        self.intrinsics = intrinsics
        self.resolution = resolution
        self.features = features
        self.hidden = hidden
        self.sh_degree = sh_degree
        self.grid_resolution = grid_resolution
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.steps = steps
        self.batch_rays = batch_rays
        self.lr_planes = lr_planes
        self.lr_mlp = lr_mlp
        self.refresh_every = refresh_every
        self.random_state = random_state
        self.threads = threads

    def _init_state(self):
        for name in ("resolution", "features", "hidden", "grid_resolution", "n_coarse", "n_fine", "batch_rays"):
            check_positive_int(getattr(self, name), name)
        rng = np.random.default_rng(self.random_state)
        params = FieldParams.init(rng, self.resolution, self.features, self.hidden, self.sh_degree)
        sampler = SamplerParams.empty(self.grid_resolution, self.n_coarse, self.n_fine, params.aabb)
        return params, sampler

    def fit(self, X, y, callback=None):
        poses = pose_rows(X)
        images = check_images(y, len(poses), self.intrinsics.shape)
        params, sampler = self._init_state()
        cfg = PretrainConfig(
            steps=check_positive_int(self.steps, "steps", 0),
            batch_rays=self.batch_rays,
            lr_planes=self.lr_planes,
            lr_mlp=self.lr_mlp,
            refresh_every=check_positive_int(self.refresh_every, "refresh_every"),
            seed=self.random_state,
        )
        res = photometric_pretrain(images, poses, self.intrinsics, params, sampler, cfg, callback)
        self.field_params_, self.sampler_, self.history_ = res.params, res.sampler, res.history
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "field_params_")
        return render_views(pose_rows(X), self.intrinsics, self.field_params_, self.sampler_, self.threads)

    def score(self, X, y) -> float:
        """Mean full-frame PSNR in dB."""
        check_is_fitted(self, "field_params_")
        poses = pose_rows(X)
        images = check_images(y, len(poses), self.intrinsics.shape)
        return heldout_psnr(images, poses, self.intrinsics, self.field_params_, self.sampler_, self.threads)

    def save(self, path, meta: Optional[dict] = None):
        check_is_fitted(self, "field_params_")
        info = {"generator": {"params": {k: v for k, v in self.get_params().items() if k != "intrinsics"}}}
        info.update(meta or {})
        return save_generator(path, self.field_params_, self.sampler_, info)

    @classmethod
    def load(cls, path, intrinsics: CameraIntrinsics = NERF_INTRINSICS) -> "NeRFGenerator":
        params, sampler, meta = load_generator(path)
        gen = cls(intrinsics=intrinsics, **meta.get("generator", {}).get("params", {}))
        gen.field_params_, gen.sampler_, gen.history_ = params, sampler, []
        return gen
