"""The pose estimator network: conv backbone, heatmap head, direct pose head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from cuevis.autodiff import Tensor, load_checkpoint, ops, save_checkpoint
from cuevis.scene.spacecraft import KEYPOINTS

N_KEYPOINTS = len(KEYPOINTS)
INPUT_SHAPE = (128, 192)
HEATMAP_STRIDE = 4
STAGE_CHANNELS = (16, 32, 64, 64)
IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])
GROUPS = ("backbone", "heatmap", "pose")


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple = INPUT_SHAPE
    channels: tuple = STAGE_CHANNELS
    head_width: int = 64
    heatmap_head: bool = True
    init_distance: float = 10.0


def _conv_shapes(prefix, c_in, c_out, k=3):
    return {f"{prefix}.w": (c_out, c_in, k, k), f"{prefix}.b": (c_out,)}


def parameter_shapes(cfg: NetworkConfig) -> dict:
    shapes = {}
    c_prev = 3
    for s, c in enumerate(cfg.channels):
        shapes.update(_conv_shapes(f"backbone.s{s}.conv0", c_prev, c))
        shapes.update(_conv_shapes(f"backbone.s{s}.conv1", c, c))
        c_prev = c
    c1, c2, c3 = cfg.channels[1:]
    shapes.update(_conv_shapes("heatmap.fuse0", c3 + c2, 64))
    shapes.update(_conv_shapes("heatmap.fuse1", 64 + c1, 32))
    shapes.update(_conv_shapes("heatmap.out", 32, N_KEYPOINTS, k=1))
    shapes.update(_conv_shapes("pose.conv", c3 + 2, cfg.head_width))
    shapes.update({"pose.fc0.w": (cfg.head_width, cfg.head_width), "pose.fc0.b": (cfg.head_width,)})
    shapes.update({"pose.fc1.w": (cfg.head_width, 7), "pose.fc1.b": (7,)})
    return shapes


def _group(name: str) -> str:
    return name.split(".", 1)[0]


class EstimatorParams:
    """Named leaf tensors of the network, grouped backbone / heatmap / pose."""

    def __init__(self, arrays: Mapping[str, np.ndarray], config: NetworkConfig = NetworkConfig()):
        expected = parameter_shapes(config)
        missing = set(expected) - set(arrays)
        if missing:
            raise ValueError(f"estimator parameters missing: {sorted(missing)}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tuple(arrays[name].shape)}")
        self.config = config
        self.leaves = {k: Tensor(np.array(arrays[k], copy=True)) for k in expected}
        self.set_trainable(True)

    @classmethod
    def init(cls, rng: np.random.Generator, config: NetworkConfig = NetworkConfig(), dtype=np.float32):
        arrays = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".b"):
                arrays[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        # start from identity orientation at the nominal range
        arrays["pose.fc1.w"] *= 0.1
        arrays["pose.fc1.b"] = np.concatenate([IDENTITY_Q, [0.0, 0.0, config.init_distance]])
        # near-zero heatmap logits: targets are almost all zero, and He-scale
        # logits make the first Adam steps kill most of the ReLUs
        arrays["heatmap.out.w"] *= 0.01
        if not config.heatmap_head:
            for name in arrays:
                if _group(name) == "heatmap":
                    arrays[name] = np.zeros_like(arrays[name])
        out = cls({k: v.astype(dtype) for k, v in arrays.items()}, config)
        if not config.heatmap_head:
            out.set_trainable(True, heatmap=False)
        return out

    @classmethod
    def zeros(cls, config: NetworkConfig = NetworkConfig(), dtype=np.float32):
        return cls({k: np.zeros(s, dtype=dtype) for k, s in parameter_shapes(config).items()}, config)

    def set_trainable(self, default: bool = True, **groups) -> None:
        for name, leaf in self.leaves.items():
            leaf.requires_grad = bool(groups.get(_group(name), default))

    def freeze(self) -> None:
        self.set_trainable(False)

    def trainable_names(self) -> list:
        return [k for k, v in self.leaves.items() if v.requires_grad]

    def trainable_arrays(self) -> dict:
        return {k: self.leaves[k].data for k in self.trainable_names()}

    def grads(self) -> dict:
        return {
            k: (np.zeros_like(self.leaves[k].data) if self.leaves[k].grad is None else self.leaves[k].grad)
            for k in self.trainable_names()
        }

    def zero_grad(self) -> None:
        for leaf in self.leaves.values():
            leaf.grad = None

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.leaves.items()}

    def names(self, group: Optional[str] = None) -> list:
        return [k for k in self.leaves if group is None or _group(k) == group]

    @property
    def dtype(self):
        return next(iter(self.leaves.values())).dtype

    def copy(self, dtype=None) -> "EstimatorParams":
        out = EstimatorParams(
            {k: (v if dtype is None else v.astype(dtype)) for k, v in self.arrays().items()}, self.config
        )
        for k, leaf in self.leaves.items():
            out.leaves[k].requires_grad = leaf.requires_grad
        return out

    def save(self, path, meta: Optional[dict] = None):
        cfg = {
            "input_shape": list(self.config.input_shape),
            "channels": list(self.config.channels),
            "head_width": self.config.head_width,
            "heatmap_head": self.config.heatmap_head,
            "init_distance": self.config.init_distance,
        }
        return save_checkpoint(path, self.arrays(), {"network": cfg, **(meta or {})})

    @classmethod
    def load(cls, path, dtype=np.float32) -> "EstimatorParams":
        tensors, meta = load_checkpoint(path)
        c = meta["network"]
        cfg = NetworkConfig(tuple(c["input_shape"]), tuple(c["channels"]), c["head_width"], c["heatmap_head"], c["init_distance"])
        return cls({k: v.astype(dtype) for k, v in tensors.items()}, cfg)


def _conv(x, params, prefix, stride=1, relu=True):
    w = params.leaves[f"{prefix}.w"]
    y = ops.conv2d(x, w, params.leaves[f"{prefix}.b"], stride=stride, padding=w.shape[-1] // 2)
    return ops.relu(y) if relu else y


def _coord_channels(B, H, W, dtype) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, H, dtype=dtype)
    xs = np.linspace(-1.0, 1.0, W, dtype=dtype)
    grid = np.stack(np.meshgrid(xs, ys, indexing="xy"))
    return np.broadcast_to(grid, (B, 2, H, W)).copy()


@dataclass
class NetworkOutput:
    q: Tensor  # (B, 4) unit quaternions
    t: Tensor  # (B, 3) metres
    heatmaps: Optional[Tensor]  # (B, K, H/4, W/4) logits, None for pose-only nets


def forward(images, params: EstimatorParams) -> NetworkOutput:
    """Run the network on (B, 3, H, W) images in [0, 1] (or a tensor of them).

    Differentiable with respect to the images. Each image is processed
    independently (no batch statistics).
    """
    x = ops.as_tensor(images)
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    H, W = params.config.input_shape
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (H, W):
        raise ValueError(f"estimator expects (B, 3, {H}, {W}) images, got {x.shape}")
    if x.dtype != params.dtype:
        x = ops.mul(x, np.ones((), dtype=params.dtype)) if x.requires_grad else Tensor(x.data.astype(params.dtype))
    x = ops.sub(ops.mul(x, 2.0), 1.0)
    feats = []
    for s in range(len(params.config.channels)):
        x = _conv(x, params, f"backbone.s{s}.conv0", stride=2)
        x = _conv(x, params, f"backbone.s{s}.conv1")
        feats.append(x)
    f1, f2, f3 = feats[1:]

    heatmaps = None
    if params.config.heatmap_head:
        h = ops.concatenate([ops.bilinear_upsample_2x(f3), f2], axis=1)
        h = _conv(h, params, "heatmap.fuse0")
        h = ops.concatenate([ops.bilinear_upsample_2x(h), f1], axis=1)
        h = _conv(h, params, "heatmap.fuse1")
        heatmaps = _conv(h, params, "heatmap.out", relu=False)

    B, _, h4, w4 = f3.shape
    p = ops.concatenate([f3, Tensor(_coord_channels(B, h4, w4, params.dtype))], axis=1)
    p = _conv(p, params, "pose.conv")
    p = ops.mean(p, axis=(2, 3))
    p = ops.relu(ops.linear(p, params.leaves["pose.fc0.w"], params.leaves["pose.fc0.b"]))
    out = ops.linear(p, params.leaves["pose.fc1.w"], params.leaves["pose.fc1.b"])
    q = ops.normalize_l2(ops.getitem(out, (slice(None), slice(0, 4))), axis=1, fallback=IDENTITY_Q)
    t = ops.getitem(out, (slice(None), slice(4, 7)))
    return NetworkOutput(q, t, heatmaps)
