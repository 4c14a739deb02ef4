"""Evaluating learned cues: estimator metrics on cue renders vs reference images."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from cuevis.autodiff import no_grad
from cuevis.estimator.network import EstimatorParams
from cuevis.estimator.train import predict_poses
from cuevis.geometry import DEFAULT_INTRINSICS, angular_error, translation_error
from cuevis.renderer.field import FieldParams
from cuevis.renderer.sampler import SamplerParams
from cuevis.scene.dataset import save_png, to_uint8
from cuevis.scene.poses import EVAL_LIGHT
from cuevis.scene.raytrace import raytrace_reference
from cuevis.scene.spacecraft import SpacecraftModel
from cuevis.cues.trainer import render_cue, render_mask

EVAL_COLUMNS = (
    "index", "qw", "qx", "qy", "qz", "tx", "ty", "tz",
    "cue_E_R_deg", "cue_E_T_m", "ref_E_R_deg", "ref_E_T_m",
)


def cue_images(poses, masks, params: FieldParams, sampler: SamplerParams, dilation_px: int = 2) -> np.ndarray:
    """Deterministic cue renders at estimator resolution, (n, H, W, 3)."""
    out = []
    with no_grad():
        for pose, mask in zip(poses, masks):
            img = render_cue(pose, render_mask(mask, dilation_px), params, sampler).data[0]
            out.append(img.transpose(1, 2, 0))
    return np.stack(out) if out else np.zeros((0,) + DEFAULT_INTRINSICS.shape + (3,))


def reference_views(poses, model: Optional[SpacecraftModel] = None, light=EVAL_LIGHT) -> tuple:
    """Ray-traced (uint8 images, masks) at the estimator resolution, quantised
    like the dataset images."""
    model = SpacecraftModel() if model is None else model
    pairs = [raytrace_reference(p, DEFAULT_INTRINSICS, model, light) for p in poses]
    return np.stack([to_uint8(p[0]) for p in pairs]), np.stack([p[1] for p in pairs])


@dataclass
class CueEvaluation:
    rows: list
    cue_images: np.ndarray
    reference_images: np.ndarray
    summary: dict = field(default_factory=dict)


def _summary(rows: list) -> dict:
    out = {"n": len(rows)}
    for key in ("cue_E_R_deg", "cue_E_T_m", "ref_E_R_deg", "ref_E_T_m"):
        vals = np.array([r[key] for r in rows])
        out[f"median_{key}"] = float(np.median(vals))
        out[f"mean_{key}"] = float(np.mean(vals))
    return out


def eval_cues(
    params: FieldParams,
    sampler: SamplerParams,
    estimator: EstimatorParams,
    poses: list,
    reference=None,
    dilation_px: int = 2,
    model: Optional[SpacecraftModel] = None,
) -> CueEvaluation:
    """Estimator errors on cue renders and on reference images of the same poses.

    ``reference`` is an optional (images, masks) pair; by default the
    reference images are ray-traced under the fixed evaluation light.
    """
    if len(poses) == 0:
        raise ValueError("eval_cues needs at least one pose")
    if reference is None:
        ref_images, masks = reference_views(poses, model)
    else:
        ref_images, masks = reference
    ref_images = np.asarray(ref_images)
    if ref_images.dtype == np.uint8:
        ref_images = ref_images.astype(np.float32) / np.float32(255)
    cues = cue_images(poses, masks, params, sampler, dilation_px)
    cue_pred = predict_poses(estimator, cues)
    ref_pred = predict_poses(estimator, ref_images)
    rows = []
    for i, (pose, c, r) in enumerate(zip(poses, cue_pred, ref_pred)):
        rows.append(
            {
                "index": i,
                **dict(zip(("qw", "qx", "qy", "qz"), pose.q.tolist())),
                **dict(zip(("tx", "ty", "tz"), pose.t.tolist())),
                "cue_E_R_deg": float(angular_error(c.pose.q, pose.q)),
                "cue_E_T_m": float(translation_error(c.pose.t, pose.t)),
                "ref_E_R_deg": float(angular_error(r.pose.q, pose.q)),
                "ref_E_T_m": float(translation_error(r.pose.t, pose.t)),
            }
        )
    return CueEvaluation(rows, cues, ref_images, _summary(rows))


def image_grid(pairs: list, columns: int = 4, gap: int = 2) -> np.ndarray:
    """Tile (reference, cue) pairs side by side into one float image."""
    if not pairs:
        raise ValueError("nothing to tile")
    H, W, _ = pairs[0][0].shape
    cell_w = 2 * W + gap
    rows = -(-len(pairs) // columns)
    canvas = np.full((rows * (H + gap) - gap, columns * (cell_w + gap) - gap, 3), 0.25)
    for k, (ref, cue) in enumerate(pairs):
        r, c = divmod(k, columns)
        y, x = r * (H + gap), c * (cell_w + gap)
        canvas[y : y + H, x : x + W] = ref
        canvas[y : y + H, x + W + gap : x + cell_w] = cue
    return canvas


def write_eval(out_dir, result: CueEvaluation, columns: int = 4) -> dict:
    """``eval.csv`` (one row per pose), ``eval_summary.csv`` and ``cues.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        for r in result.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    with open(out / "eval_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in result.summary.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    grid = image_grid(list(zip(result.reference_images, result.cue_images)), columns)
    save_png(out / "cues.png", to_uint8(grid))
    return {"csv": out / "eval.csv", "summary": out / "eval_summary.csv", "png": out / "cues.png"}


def read_eval(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "index" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
