"""Pose estimator: conv network with heatmap and pose heads, plus PnP."""
from cuevis.estimator.heatmaps import Detections, extract_peaks, target_heatmaps
from cuevis.estimator.model import PoseEstimator
from cuevis.estimator.network import EstimatorParams, NetworkConfig, NetworkOutput, forward
from cuevis.estimator.pnp import PnPResult, pnp_multistart, pnp_solve
from cuevis.estimator.train import (
    EstimatorTrainConfig,
    Prediction,
    estimator_train,
    evaluation_report,
    predict_poses,
    to_nchw,
    write_report,
)

__all__ = [
    "Detections",
    "EstimatorParams",
    "EstimatorTrainConfig",
    "NetworkConfig",
    "NetworkOutput",
    "PnPResult",
    "PoseEstimator",
    "Prediction",
    "estimator_train",
    "evaluation_report",
    "extract_peaks",
    "forward",
    "pnp_multistart",
    "pnp_solve",
    "predict_poses",
    "target_heatmaps",
    "to_nchw",
    "write_report",
]
