"""Supervised training, inference and evaluation of the estimator."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from cuevis.autodiff import Adam, backward, no_grad, ops
from cuevis.estimator.heatmaps import CONFIDENCE_THRESHOLD, DEFAULT_SIGMA_PX, batch_target_heatmaps, extract_peaks
from cuevis.estimator.network import EstimatorParams, NetworkConfig, forward
from cuevis.estimator.pnp import pnp_multistart
from cuevis.geometry import (
    DEFAULT_INTRINSICS,
    CameraIntrinsics,
    Pose,
    angular_error,
    arrays_to_poses,
    project_points,
    translation_error,
)
from cuevis.losses import heatmap_l2_loss, speed_loss
from cuevis.scene.spacecraft import KEYPOINTS

HEADS = ("heatmap+pose", "pose-only")


@dataclass(frozen=True)
class EstimatorTrainConfig:
    heads: str = "heatmap+pose"
    steps: int = 4000
    batch_size: int = 8
    lr: float = 1e-3
    w_heatmap: float = 1.0
    w_pose: float = 1.0
    sigma_px: float = DEFAULT_SIGMA_PX
    log_every: int = 50
    seed: int = 0
    augment: bool = False  # reserved, no photometric augmentation is implemented

    def __post_init__(self):
        if self.heads not in HEADS:
            raise ValueError(f"heads must be one of {HEADS}, got {self.heads!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.augment:
            raise NotImplementedError("photometric augmentation is not implemented")

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(heatmap_head=self.heads == "heatmap+pose")


def to_nchw(images) -> np.ndarray:
    """(N, H, W, 3) uint8 or float images to float32 (N, 3, H, W) in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    scale = 1.0 / 255.0 if arr.dtype == np.uint8 else 1.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32) * np.float32(scale)


def training_loss(out, q, t, target_hm, config: EstimatorTrainConfig):
    loss = ops.mul(speed_loss((out.q, out.t), (q, t)), config.w_pose)
    if out.heatmaps is not None and config.w_heatmap > 0:
        loss = ops.add(loss, ops.mul(heatmap_l2_loss(out.heatmaps, target_hm), config.w_heatmap))
    return loss


@dataclass
class TrainResult:
    params: EstimatorParams
    history: list = field(default_factory=list)


def estimator_train(
    images,
    poses,
    config: EstimatorTrainConfig = EstimatorTrainConfig(),
    params: Optional[EstimatorParams] = None,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    callback: Optional[Callable] = None,
) -> TrainResult:
    """Adam on heatmap L2 (if the head is enabled) plus the SPEED loss.

    ``images`` is (N, H, W, 3) uint8 or float, ``poses`` a list of Pose.
    Minibatches are drawn as shuffled epochs from ``config.seed``. With a
    pose-only configuration the heatmap head stays at its zero
    initialisation and receives no updates.
    """
    n = len(images)
    if n == 0 or n != len(poses):
        raise ValueError(f"need a non-empty training set with one pose per image, got {n} and {len(poses)}")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = EstimatorParams.init(rng, config.network)
    params = params.copy()
    if config.heads == "pose-only":
        params.set_trainable(True, heatmap=False)
    result = TrainResult(params)
    if config.steps <= 0:
        return result
    q_all = np.array([p.q for p in poses])
    t_all = np.array([p.t for p in poses])
    with_hm = params.config.heatmap_head and config.heads == "heatmap+pose"
    hm_all = batch_target_heatmaps(poses, intrinsics, config.sigma_px) if with_hm else None
    opt = Adam(params.trainable_arrays(), lr=config.lr)
    order = np.empty(0, dtype=int)
    t0 = time.perf_counter()
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[: config.batch_size], order[config.batch_size :]
        params.zero_grad()
        out = forward(to_nchw(images[idx]), params)
        loss = training_loss(out, q_all[idx], t_all[idx], None if hm_all is None else hm_all[idx], config)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(
                f"estimator training diverged at step {step}: loss={value}; try a lower lr than {config.lr}"
            )
        backward(loss)
        opt.step(params.grads())
        if step % config.log_every == 0 or step == config.steps - 1:
            rec = {"step": step, "loss": value, "wall_s": time.perf_counter() - t0}
            result.history.append(rec)
            if callback is not None:
                callback(rec)
    return result


@dataclass
class Prediction:
    head: Pose
    pose: Pose
    uv: Optional[np.ndarray]
    confidence: Optional[np.ndarray]
    refined: bool


def predict_poses(
    params: EstimatorParams,
    images,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    refine: Optional[bool] = None,
    batch_size: int = 16,
) -> list:
    """Pose per image: heatmap peaks refined by PnP when the heatmap head
    exists, else the pose head alone.

    PnP starts from the pose-head output plus a fixed set of orientations
    (see :func:`pnp_multistart`); when the detections cannot be fitted the
    pose-head output is kept and ``refined`` is False.
    """
    refine = params.config.heatmap_head if refine is None else refine
    x = to_nchw(images)
    preds = []
    for s in range(0, len(x), batch_size):
        with no_grad():
            out = forward(x[s : s + batch_size], params)
        for b, head in enumerate(arrays_to_poses(out.q.data.astype(np.float64), out.t.data.astype(np.float64))):
            if out.heatmaps is None or not refine:
                preds.append(Prediction(head, head, None, None, False))
                continue
            det = extract_peaks(out.heatmaps.data[b])
            res = pnp_multistart(det.uv, det.confidence, intrinsics, head, threshold=CONFIDENCE_THRESHOLD)
            preds.append(Prediction(head, res.pose, det.uv, det.confidence, not res.fallback))
    return preds


def evaluation_report(preds: list, poses: list, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> dict:
    rows = []
    for i, (pr, gt) in enumerate(zip(preds, poses)):
        row = {
            "index": i,
            "E_R_deg": float(angular_error(pr.pose.q, gt.q)),
            "E_T_m": float(translation_error(pr.pose.t, gt.t)),
            "head_E_R_deg": float(angular_error(pr.head.q, gt.q)),
            "head_E_T_m": float(translation_error(pr.head.t, gt.t)),
            "refined": bool(pr.refined),
        }
        if pr.uv is not None:
            err = np.linalg.norm(pr.uv - project_points(gt, intrinsics, KEYPOINTS), axis=1)
            row["keypoint_px"] = [float(e) for e in err]
        rows.append(row)
    er = np.array([r["E_R_deg"] for r in rows])
    et = np.array([r["E_T_m"] for r in rows])
    summary = {
        "n": len(rows),
        "median_E_R_deg": float(np.median(er)) if len(er) else float("nan"),
        "mean_E_R_deg": float(np.mean(er)) if len(er) else float("nan"),
        "median_E_T_m": float(np.median(et)) if len(et) else float("nan"),
        "mean_E_T_m": float(np.mean(et)) if len(et) else float("nan"),
    }
    kp = [r["keypoint_px"] for r in rows if "keypoint_px" in r]
    if kp:
        summary["median_keypoint_px"] = float(np.median(kp))
    return {"summary": summary, "images": rows}


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1))
    return path


def config_dict(config: EstimatorTrainConfig) -> dict:
    return asdict(config)
