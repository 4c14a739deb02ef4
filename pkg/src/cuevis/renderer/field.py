"""The neural field: K-planes features, a density MLP and a colour MLP."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from cuevis.autodiff import Tensor, load_checkpoint, no_grad, ops, save_checkpoint
from cuevis.renderer.encoding import PLANE_NAMES, angles_to_direction, encode_position, sh_basis

SCENE_HALF_EXTENT = 1.2
DEFAULT_AABB = ((-SCENE_HALF_EXTENT,) * 3, (SCENE_HALF_EXTENT,) * 3)
GROUPS = ("planes", "density", "color")
DENSITY_FEATURES = 15


def _group(name: str) -> str:
    if name.startswith("plane_"):
        return "planes"
    return name.split(".", 1)[0]


def _mlp_shapes(prefix: str, sizes) -> dict:
    out = {}
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}.w{k}"] = (a, b)
        out[f"{prefix}.b{k}"] = (b,)
    return out


@dataclass
class SamplePoint:
    position: tuple
    theta: float
    phi: float
    delta: float


class FieldParams:
    """All field parameters as persistent leaf tensors.

    Parameters are grouped into ``planes``, ``density`` and ``color``; a
    group's trainable flag sets ``requires_grad`` on its leaves, so frozen
    groups never receive gradients and are never touched by an optimizer
    built from :meth:`trainable_arrays`.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], aabb=DEFAULT_AABB, sh_degree: int = 2, trainable=None):
        lo, hi = (np.asarray(a, dtype=np.float64) for a in aabb)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError(f"degenerate aabb {aabb}")
        for name, arr in arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"field parameter {name} has non-finite entries")
        self.aabb = (tuple(lo.tolist()), tuple(hi.tolist()))
        self.sh_degree = int(sh_degree)
        self.leaves = {k: Tensor(np.array(v, copy=True)) for k, v in arrays.items()}
        self.trainable = {g: True for g in GROUPS}
        self.set_trainable(**(trainable or {}))

    # -- construction -----------------------------------------------------
    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        resolution: int = 64,
        features: int = 16,
        hidden: int = 64,
        sh_degree: int = 2,
        aabb=DEFAULT_AABB,
        dtype=np.float32,
        plane_init=(0.1, 0.5),
    ) -> "FieldParams":
        shapes = {n: (resolution, resolution, features) for n in PLANE_NAMES}
        shapes.update(_mlp_shapes("density", (features, hidden, hidden, 1 + DENSITY_FEATURES)))
        n_sh = (sh_degree + 1) ** 2
        shapes.update(_mlp_shapes("color", (DENSITY_FEATURES + n_sh, hidden, hidden, 3)))
        arrays = {}
        for name, shape in shapes.items():
            if name.startswith("plane_"):
                arrays[name] = rng.uniform(*plane_init, size=shape)
            elif ".w" in name:
                bound = np.sqrt(6.0 / shape[0])
                arrays[name] = rng.uniform(-bound, bound, size=shape)
            else:
                arrays[name] = np.zeros(shape)
        return cls({k: v.astype(dtype) for k, v in arrays.items()}, aabb, sh_degree)

    @classmethod
    def zeros_like(cls, other: "FieldParams") -> "FieldParams":
        return cls({k: np.zeros_like(v) for k, v in other.arrays().items()}, other.aabb, other.sh_degree)

    def copy(self, dtype=None) -> "FieldParams":
        arrays = {k: (v if dtype is None else v.astype(dtype)) for k, v in self.arrays().items()}
        return FieldParams(arrays, self.aabb, self.sh_degree, dict(self.trainable))

    # -- parameter groups ---------------------------------------------------
    def set_trainable(self, **flags) -> None:
        for g, flag in flags.items():
            if g not in GROUPS:
                raise KeyError(f"unknown parameter group {g!r}; expected one of {GROUPS}")
            self.trainable[g] = bool(flag)
        for name, leaf in self.leaves.items():
            leaf.requires_grad = self.trainable[_group(name)]

    def names(self, group: Optional[str] = None) -> list:
        return [n for n in self.leaves if group is None or _group(n) == group]

    def trainable_names(self) -> list:
        return [n for n in self.leaves if self.trainable[_group(n)]]

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.leaves.items()}

    def trainable_arrays(self) -> dict:
        return {k: self.leaves[k].data for k in self.trainable_names()}

    def grads(self) -> dict:
        out = {}
        for k in self.trainable_names():
            g = self.leaves[k].grad
            out[k] = np.zeros_like(self.leaves[k].data) if g is None else g
        return out

    def zero_grad(self) -> None:
        for leaf in self.leaves.values():
            leaf.grad = None

    @property
    def planes(self) -> list:
        return [self.leaves[n] for n in PLANE_NAMES]

    @property
    def dtype(self):
        return self.leaves[PLANE_NAMES[0]].dtype

    # -- persistence ----------------------------------------------------------
    def save(self, path, meta: Optional[dict] = None):
        info = {"aabb": self.aabb, "sh_degree": self.sh_degree, "trainable": self.trainable}
        info.update(meta or {})
        return save_checkpoint(path, self.arrays(), {"field": info})

    @classmethod
    def load(cls, path, dtype=np.float32) -> "FieldParams":
        tensors, meta = load_checkpoint(path)
        info = meta.get("field", {})
        arrays = {k: v.astype(dtype) for k, v in tensors.items() if _group(k) in GROUPS}
        return cls(arrays, info.get("aabb", DEFAULT_AABB), info.get("sh_degree", 2), info.get("trainable"))


def _mlp(x: Tensor, params: FieldParams, prefix: str, layers: int = 3) -> Tensor:
    for k in range(layers):
        x = ops.linear(x, params.leaves[f"{prefix}.w{k}"], params.leaves[f"{prefix}.b{k}"])
        if k < layers - 1:
            x = ops.relu(x)
    return x


def field_eval(positions, dirs, params: FieldParams):
    """Colour and density at world points.

    ``positions`` (N, 3) and unit view directions ``dirs`` (N, 3) are plain
    arrays. Returns ``(rgb (N, 3), sigma (N,))`` tensors.
    """
    feat = encode_position(positions, params.planes, params.aabb)
    out = _mlp(feat, params, "density")
    sigma = ops.softplus(ops.getitem(out, (slice(None), 0)))
    f_sigma = ops.getitem(out, (slice(None), slice(1, None)))
    sh = Tensor(sh_basis(dirs, params.sh_degree).astype(params.dtype))
    rgb = ops.sigmoid(_mlp(ops.concatenate([f_sigma, sh], axis=1), params, "color"))
    return rgb, sigma


def field_density(positions, params: FieldParams) -> np.ndarray:
    """Density only, as a plain array (no graph)."""
    with no_grad():
        feat = encode_position(positions, params.planes, params.aabb)
        out = _mlp(feat, params, "density")
        return ops.softplus(ops.getitem(out, (slice(None), 0))).data


def field_eval_points(points, params: FieldParams) -> np.ndarray:
    """Evaluate a list of :class:`SamplePoint`; rows are (r, g, b, sigma)."""
    if len(points) == 0:
        return np.zeros((0, 4))
    pos = np.array([p.position for p in points], dtype=np.float64)
    dirs = angles_to_direction([p.theta for p in points], [p.phi for p in points])
    rgb, sigma = field_eval(pos, dirs, params)
    return np.concatenate([rgb.data, sigma.data[:, None]], axis=1)
