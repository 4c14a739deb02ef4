"""Training the field through the frozen estimator.

Every image step renders the foreground of one labelled pose at half
resolution, upsamples it to the estimator input size and back-propagates
the estimator's loss into the field. Gradients of ``N`` consecutive steps
are summed and their mean is handed to Adam.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from cuevis.autodiff import Adam, backward, ops, tensors_digest
from cuevis.estimator.heatmaps import CONFIDENCE_THRESHOLD, extract_peaks, target_heatmaps
from cuevis.estimator.network import EstimatorParams, forward
from cuevis.estimator.pnp import pnp_multistart
from cuevis.geometry import DEFAULT_INTRINSICS, Pose, angular_error, translation_error
from cuevis.losses import DEFAULT_LOSS_WEIGHTS, combined_cue_loss
from cuevis.renderer.field import FieldParams
from cuevis.renderer.generator import NERF_INTRINSICS, save_generator
from cuevis.renderer.render import render_image
from cuevis.renderer.sampler import SamplerParams

SUPERVISION = ("combined", "heatmap-only", "pose-only")
ENCODING = ("frozen", "trainable")
LOG_COLUMNS = ("update_index", "loss", "E_R_deg", "E_T_m", "wall_ms")


@dataclass(frozen=True)
class CueTrainConfig:
    accumulation_steps: int = 10
    total_steps: int = 10000
    w_heatmap: float = DEFAULT_LOSS_WEIGHTS[0]
    w_pose: float = DEFAULT_LOSS_WEIGHTS[1]
    supervision: str = "combined"
    encoding: str = "frozen"
    lr_planes: float = 1e-2
    lr_mlp: float = 1e-3
    betas: tuple = (0.9, 0.999)
    dilation_px: int = 2
    sampler_refresh: int = 100  # updates between occupancy refreshes, trainable encoding only; 0 disables
    jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ValueError(f"accumulation_steps must be >= 1, got {self.accumulation_steps}")
        if self.total_steps < 0 or self.total_steps % self.accumulation_steps:
            raise ValueError(
                f"total_steps ({self.total_steps}) must be a non-negative multiple of "
                f"accumulation_steps ({self.accumulation_steps})"
            )
        if self.supervision not in SUPERVISION:
            raise ValueError(f"supervision must be one of {SUPERVISION}, got {self.supervision!r}")
        if self.encoding not in ENCODING:
            raise ValueError(f"encoding must be one of {ENCODING}, got {self.encoding!r}")
        if self.w_heatmap < 0 or self.w_pose < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dilation_px < 0:
            raise ValueError(f"dilation_px must be >= 0, got {self.dilation_px}")

    @property
    def updates(self) -> int:
        return self.total_steps // self.accumulation_steps

    def loss_weights(self, has_heatmaps: bool = True) -> tuple:
        w_hm = self.w_heatmap if self.supervision in ("combined", "heatmap-only") and has_heatmaps else 0.0
        w_pose = self.w_pose if self.supervision in ("combined", "pose-only") else 0.0
        return (w_hm, w_pose)

    def learning_rates(self) -> dict:
        return {"plane_": self.lr_planes, "density.": self.lr_mlp, "color.": self.lr_mlp}


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius**2


def render_mask(mask, dilation_px: int = 2) -> np.ndarray:
    """Half-resolution render mask from a full-resolution silhouette.

    A half-resolution pixel is foreground when any of its 2x2 source pixels
    is; the result is then dilated by a disk of ``dilation_px`` pixels.
    """
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    if H % 2 or W % 2:
        raise ValueError(f"mask shape {mask.shape} is not divisible by 2")
    half = mask.reshape(H // 2, 2, W // 2, 2).any(axis=(1, 3))
    if dilation_px > 0 and half.any():
        half = ndimage.binary_dilation(half, structure=_disk(dilation_px))
    return half


def upsample_support(half_mask) -> np.ndarray:
    """Full-resolution pixels that can be non-black after ×2 upsampling."""
    m = np.asarray(half_mask, dtype=np.float64)
    up = ops.bilinear_upsample_2x(m).data
    return up > 0


def render_cue(pose: Pose, half_mask, params: FieldParams, sampler: SamplerParams, rng=None):
    """Foreground render at half resolution, upsampled to the estimator input.

    Returns a (1, 3, 2H, 2W) tensor; background pixels are exactly zero.
    """
    img = render_image(pose, NERF_INTRINSICS, params, sampler, mask=half_mask, rng=rng)
    chw = ops.transpose(img, (2, 0, 1))
    up = ops.bilinear_upsample_2x(chw)
    return ops.reshape(up, (1,) + up.shape)


def predicted_pose(out, b: int = 0, intrinsics=DEFAULT_INTRINSICS) -> Pose:
    """What the estimator reports: PnP-refined when it has heatmaps."""
    head = Pose.from_arrays(out.q.data[b].astype(np.float64), out.t.data[b].astype(np.float64))
    if out.heatmaps is None:
        return head
    det = extract_peaks(out.heatmaps.data[b])
    return pnp_multistart(det.uv, det.confidence, intrinsics, head, threshold=CONFIDENCE_THRESHOLD).pose


@dataclass
class StepResult:
    loss: float
    grads: dict
    prediction: Pose


def cue_loss(pose: Pose, half_mask, params: FieldParams, sampler: SamplerParams, estimator: EstimatorParams, config, rng=None):
    """Loss tensor of one image step and the estimator output it came from."""
    image = render_cue(pose, half_mask, params, sampler, rng)
    if image.dtype != estimator.dtype:
        image = ops.mul(image, np.ones((), dtype=estimator.dtype))
    out = forward(image, estimator)
    weights = config.loss_weights(out.heatmaps is not None)
    target = target_heatmaps(pose, DEFAULT_INTRINSICS)[None] if weights[0] > 0 else None
    loss = combined_cue_loss((out.q, out.t), out.heatmaps, (pose.q[None], pose.t[None]), target, weights)
    return loss, out


def cue_step(
    pose: Pose,
    mask,
    params: FieldParams,
    sampler: SamplerParams,
    estimator: EstimatorParams,
    config: CueTrainConfig,
    rng: Optional[np.random.Generator] = None,
    predict: bool = True,
) -> StepResult:
    """One image step: render, run the estimator, compute the loss, backprop.

    ``mask`` is the full-resolution silhouette of the target at ``pose``.
    Gradients reach only the trainable field groups; the returned arrays
    are copies.
    """
    if any(leaf.requires_grad for leaf in estimator.leaves.values()):
        raise ValueError("the estimator must be frozen (call freeze()) before cue training")
    params.zero_grad()
    loss, out = cue_loss(pose, render_mask(mask, config.dilation_px), params, sampler, estimator, config, rng)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"cue loss is {value} at pose q={pose.q.tolist()} t={pose.t.tolist()}")
    if loss.requires_grad:
        backward(loss)
    grads = {k: np.array(g, copy=True) for k, g in params.grads().items()}
    return StepResult(value, grads, predicted_pose(out) if predict else pose)


class GradAccumulator:
    """Running gradient sums G and the number of image steps s since the last reset."""

    def __init__(self, arrays: dict):
        self.sums = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.count = 0

    def add(self, grads: dict) -> None:
        for k, g in grads.items():
            self.sums[k] += g
        self.count += 1

    def mean(self, n: Optional[int] = None) -> dict:
        n = self.count if n is None else n
        return {k: v / v.dtype.type(n) for k, v in self.sums.items()}

    def reset(self) -> None:
        for v in self.sums.values():
            v.fill(0)
        self.count = 0

    def is_zero(self) -> bool:
        return self.count == 0 and all(not v.any() for v in self.sums.values())


def pose_schedule(n_records: int, total_steps: int, seed: int) -> np.ndarray:
    """Record index for every image step: concatenated shuffled epochs."""
    if n_records < 1:
        raise ValueError("cue training needs at least one labelled pose")
    rng = np.random.default_rng([seed, 0])
    epochs = -(-total_steps // n_records)
    order = np.concatenate([rng.permutation(n_records) for _ in range(epochs)]) if epochs else np.empty(0, int)
    return order[:total_steps].astype(np.intp)


def step_rng(config: CueTrainConfig, step: int) -> Optional[np.random.Generator]:
    return np.random.default_rng([config.seed, 1, step]) if config.jitter else None


def initial_generator(config: CueTrainConfig, pretrained: Optional[tuple] = None, dtype=np.float32) -> tuple:
    """(params, sampler) to start from.

    Frozen encoding copies the pretrained planes and occupancy grid and
    freezes the planes. Trainable encoding starts from a fresh field and an
    all-zero occupancy grid (uniform importance sampling).
    """
    if config.encoding == "frozen":
        if pretrained is None:
            raise ValueError("frozen encoding needs a pretrained (params, sampler) pair")
        params, sampler = pretrained
        params = params.copy(dtype)
        params.set_trainable(planes=False, density=True, color=True)
        return params, sampler.copy()
    rng = np.random.default_rng([config.seed, 2])
    if pretrained is not None:
        ref, ref_sampler = pretrained
        params = FieldParams.init(
            rng,
            resolution=ref.planes[0].shape[0],
            features=ref.planes[0].shape[2],
            hidden=ref.leaves["density.w0"].shape[1],
            sh_degree=ref.sh_degree,
            aabb=ref.aabb,
            dtype=dtype,
        )
        sampler = SamplerParams.empty(ref_sampler.resolution, ref_sampler.n_coarse, ref_sampler.n_fine, ref.aabb)
    else:
        params = FieldParams.init(rng, dtype=dtype)
        sampler = SamplerParams.empty(aabb=params.aabb)
    return params, sampler


@dataclass
class CueTrainResult:
    params: FieldParams
    sampler: SamplerParams
    log: list = field(default_factory=list)
    estimator_digest: str = ""
    frozen_digest: str = ""


def frozen_digest(params: FieldParams, sampler: SamplerParams) -> str:
    tensors = {n: params.leaves[n].data for n in params.names("planes")}
    tensors.update(sampler.state())
    return tensors_digest(tensors)


def write_log(path, rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["update_index"], repr(r["loss"]), repr(r["E_R_deg"]), repr(r["E_T_m"]), r["wall_ms"]])
    return path


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return [
            {
                "update_index": int(r["update_index"]),
                "loss": float(r["loss"]),
                "E_R_deg": float(r["E_R_deg"]),
                "E_T_m": float(r["E_T_m"]),
                "wall_ms": int(r["wall_ms"]),
            }
            for r in csv.DictReader(fh)
        ]


def cue_train(
    poses: list,
    masks,
    generator: tuple,
    estimator: EstimatorParams,
    config: CueTrainConfig = CueTrainConfig(),
    out_dir=None,
    callback: Optional[Callable] = None,
) -> CueTrainResult:
    """Gradient-accumulation training of the field against a frozen estimator.

    ``poses`` and ``masks`` are the labelled poses and their full-resolution
    silhouettes; ``generator`` is the (params, sampler) pair from
    :func:`initial_generator`. Neither the estimator nor, in frozen mode,
    the planes and occupancy grid change; both are checked after the run.
    With ``out_dir`` the log is written to ``cue_log.csv`` and the final
    field to the ``generator`` checkpoint.
    """
    if len(poses) != len(masks):
        raise ValueError(f"{len(poses)} poses but {len(masks)} masks")
    params, sampler = generator[0].copy(), generator[1].copy()
    if config.encoding == "frozen":
        params.set_trainable(planes=False)
    est = estimator.copy()
    est.freeze()
    est_digest = tensors_digest(estimator.arrays())
    frz_digest = frozen_digest(params, sampler)

    schedule = pose_schedule(len(poses), config.total_steps, config.seed)
    opt = Adam(params.trainable_arrays(), lr=config.learning_rates(), betas=config.betas)
    acc = GradAccumulator(params.trainable_arrays())
    result = CueTrainResult(params, sampler, [], est_digest, frz_digest)
    N = config.accumulation_steps
    losses, e_r, e_t = [], [], []
    t0 = time.perf_counter()
    for s in range(config.total_steps):
        k = schedule[s]
        pose = poses[k]
        step = cue_step(pose, masks[k], params, sampler, est, config, step_rng(config, s))
        acc.add(step.grads)
        losses.append(step.loss)
        e_r.append(angular_error(step.prediction.q, pose.q))
        e_t.append(translation_error(step.prediction.t, pose.t))
        if (s + 1) % N:
            continue
        update = acc.mean(N)
        bad = [name for name, g in update.items() if not np.all(np.isfinite(g))]
        if bad:
            raise FloatingPointError(f"non-finite gradient for {bad} at image step {s}")
        opt.step(update)
        acc.reset()
        u = (s + 1) // N
        row = {
            "update_index": u,
            "loss": float(np.mean(losses)),
            "E_R_deg": float(np.mean(e_r)),
            "E_T_m": float(np.mean(e_t)),
            "wall_ms": int(round(1000 * (time.perf_counter() - t0))),
        }
        losses, e_r, e_t = [], [], []
        result.log.append(row)
        if callback is not None:
            callback(row)
        if config.encoding == "trainable" and config.sampler_refresh and u % config.sampler_refresh == 0:
            result.sampler = sampler = sampler.refreshed(params)

    if tensors_digest(estimator.arrays()) != est_digest or tensors_digest(est.arrays()) != est_digest:
        raise AssertionError("estimator parameters changed during cue training")
    if config.encoding == "frozen" and frozen_digest(params, sampler) != frz_digest:
        raise AssertionError("frozen planes or occupancy grid changed during cue training")
    if out_dir is not None:
        out = Path(out_dir)
        write_log(out / "cue_log.csv", result.log)
        save_generator(out / "generator", params, sampler, {"cue_train": config_dict(config)})
    return result


def config_dict(config: CueTrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(d["betas"])
    return d
