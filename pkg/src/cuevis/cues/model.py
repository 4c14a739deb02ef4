"""Estimator-style wrapper around cue training."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from cuevis._validation import check_positive_int, pose_rows
from cuevis.cues.evaluate import cue_images, eval_cues, reference_views
from cuevis.cues.trainer import CueTrainConfig, cue_train, initial_generator
from cuevis.estimator.network import EstimatorParams


class CueGenerator(BaseEstimator):
    """Field trained so that a frozen estimator recovers the rendering pose.

    ``fit(X, y, estimator=..., pretrained=...)`` takes poses ``X`` ((n, 7)
    rows or Pose objects) and their full-resolution silhouettes ``y``
    (n, H, W). ``predict(X)`` returns cue images (n, H, W, 3); silhouettes
    default to ray-traced ones of the procedural model.
    """

    def __init__(
        self,
        accumulation_steps: int = 10,
        total_steps: int = 10000,
        w_heatmap: float = 0.01,
        w_pose: float = 0.01,
        supervision: str = "combined",
        encoding: str = "frozen",
        lr_planes: float = 1e-2,
        lr_mlp: float = 1e-3,
        dilation_px: int = 2,
        sampler_refresh: int = 100,
        jitter: bool = True,
        random_state: int = 0,
    ):
        self.accumulation_steps = accumulation_steps
        self.total_steps = total_steps
        self.w_heatmap = w_heatmap
        self.w_pose = w_pose
        self.supervision = supervision
        self.encoding = encoding
        self.lr_planes = lr_planes
        self.lr_mlp = lr_mlp
        self.dilation_px = dilation_px
        self.sampler_refresh = sampler_refresh
        self.jitter = jitter
        self.random_state = random_state

    def train_config(self) -> CueTrainConfig:
        return CueTrainConfig(
            accumulation_steps=check_positive_int(self.accumulation_steps, "accumulation_steps"),
            total_steps=check_positive_int(self.total_steps, "total_steps", 0),
            w_heatmap=self.w_heatmap,
            w_pose=self.w_pose,
            supervision=self.supervision,
            encoding=self.encoding,
            lr_planes=self.lr_planes,
            lr_mlp=self.lr_mlp,
            dilation_px=check_positive_int(self.dilation_px, "dilation_px", 0),
            sampler_refresh=check_positive_int(self.sampler_refresh, "sampler_refresh", 0),
            jitter=bool(self.jitter),
            seed=self.random_state,
        )

    def fit(self, X, y, estimator: EstimatorParams = None, pretrained: Optional[tuple] = None, callback=None):
        if estimator is None:
            raise ValueError("fit needs the frozen estimator parameters")
        poses = pose_rows(X)
        masks = np.asarray(y, dtype=bool)
        if masks.ndim != 3 or len(masks) != len(poses):
            raise ValueError(f"y must be (n, H, W) silhouettes for {len(poses)} poses, got {masks.shape}")
        cfg = self.train_config()
        res = cue_train(poses, masks, initial_generator(cfg, pretrained), estimator, cfg, callback=callback)
        self.field_params_, self.sampler_, self.log_ = res.params, res.sampler, res.log
        self.estimator_ = estimator
        return self

    def predict(self, X, masks=None) -> np.ndarray:
        check_is_fitted(self, "field_params_")
        poses = pose_rows(X)
        if masks is None:
            _, masks = reference_views(poses)
        return cue_images(poses, masks, self.field_params_, self.sampler_, self.dilation_px)

    def evaluate(self, X) -> dict:
        check_is_fitted(self, "field_params_")
        res = eval_cues(self.field_params_, self.sampler_, self.estimator_, pose_rows(X), dilation_px=self.dilation_px)
        return res.summary

    def score(self, X, y=None) -> float:
        """Negative median angular error of the estimator on cue images."""
        return -self.evaluate(X)["median_cue_E_R_deg"]
