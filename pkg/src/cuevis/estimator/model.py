"""Estimator-style wrapper: images in, poses out."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from cuevis.autodiff import load_checkpoint
from cuevis._validation import check_images, check_positive_int, pose_rows
from cuevis.estimator.network import EstimatorParams
from cuevis.estimator.train import EstimatorTrainConfig, estimator_train, evaluation_report, predict_poses
from cuevis.geometry import DEFAULT_INTRINSICS, CameraIntrinsics, poses_to_arrays


class PoseEstimator(BaseEstimator):
    """Keypoint-heatmap + direct-pose network with PnP refinement.

    ``fit(X, y)`` takes images ``X`` (n, 128, 192, 3) and poses ``y`` as
    (n, 7) rows [q, t] or Pose objects. ``predict(X)`` returns (n, 7) rows.
    """

    def __init__(
        self,
        heads: str = "heatmap+pose",
        steps: int = 4000,
        batch_size: int = 8,
        lr: float = 1e-3,
        w_heatmap: float = 1.0,
        w_pose: float = 1.0,
        sigma_px: float = 2.0,
        random_state: int = 0,
        intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    ):
        self.heads = heads
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.w_heatmap = w_heatmap
        self.w_pose = w_pose
        self.sigma_px = sigma_px
        self.random_state = random_state
        self.intrinsics = intrinsics

    def train_config(self) -> EstimatorTrainConfig:
        return EstimatorTrainConfig(
            heads=self.heads,
            steps=check_positive_int(self.steps, "steps", 0),
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            lr=self.lr,
            w_heatmap=self.w_heatmap,
            w_pose=self.w_pose,
            sigma_px=self.sigma_px,
            seed=self.random_state,
        )

    def fit(self, X, y, callback=None):
        poses = pose_rows(y)
        images = check_images(X, len(poses), self.intrinsics.shape, name="X").astype(np.float32)
        res = estimator_train(images, poses, self.train_config(), intrinsics=self.intrinsics, callback=callback)
        self.params_, self.history_ = res.params, res.history
        return self

    def _predictions(self, X):
        check_is_fitted(self, "params_")
        images = check_images(X, shape=self.intrinsics.shape, name="X").astype(np.float32)
        return predict_poses(self.params_, images, self.intrinsics)

    def predict(self, X) -> np.ndarray:
        q, t = poses_to_arrays([p.pose for p in self._predictions(X)])
        return np.concatenate([q, t], axis=1)

    def evaluate(self, X, y) -> dict:
        """JSON-ready report with per-image E_R / E_T and keypoint errors."""
        return evaluation_report(self._predictions(X), pose_rows(y), self.intrinsics)

    def score(self, X, y) -> float:
        """Negative median angular error in degrees (higher is better)."""
        return -self.evaluate(X, y)["summary"]["median_E_R_deg"]

    def save(self, path, meta: Optional[dict] = None):
        check_is_fitted(self, "params_")
        info = {"estimator": {k: v for k, v in self.get_params().items() if k != "intrinsics"}}
        info.update(meta or {})
        return self.params_.save(path, info)

    @classmethod
    def load(cls, path, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> "PoseEstimator":
        _, meta = load_checkpoint(path)
        est = cls(intrinsics=intrinsics, **meta.get("estimator", {}))
        est.params_, est.history_ = EstimatorParams.load(path), []
        return est
