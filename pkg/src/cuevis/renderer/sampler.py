"""Ray sampling: stratified coarse samples plus occupancy-guided fine samples."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from cuevis.renderer.encoding import direction_to_angles
from cuevis.renderer.field import DEFAULT_AABB, FieldParams, SamplePoint, field_density

SLAB_EPS = 1e-9
WEIGHT_FLOOR = 1e-5
# deterministic offsets inside each stratum when no rng is given; distinct so
# coarse and fine samples never coincide on a uniform pdf
COARSE_OFFSET = 0.5
FINE_OFFSET = 0.25


def ray_aabb(origins, dirs, aabb, eps: float = SLAB_EPS):
    """Slab test. Returns ``(t_near, t_far, hit)``; ``t_near`` is clipped at 0."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    lo, hi = (np.asarray(a, dtype=np.float64) for a in aabb)
    safe = np.where(np.abs(d) < eps, np.where(d < 0, -eps, eps), d)
    t1 = (lo - o) / safe
    t2 = (hi - o) / safe
    t_near = np.maximum(np.minimum(t1, t2).max(axis=1), 0.0)
    t_far = np.maximum(t1, t2).min(axis=1)
    return t_near, t_far, t_far > t_near


@dataclass
class SamplerParams:
    """Occupancy grid over the scene box plus per-ray sample counts."""

    grid: np.ndarray
    n_coarse: int = 32
    n_fine: int = 32
    aabb: tuple = DEFAULT_AABB

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or len(set(self.grid.shape)) != 1:
            raise ValueError(f"occupancy grid must be cubic (R, R, R), got {self.grid.shape}")
        if np.any(self.grid < 0) or not np.all(np.isfinite(self.grid)):
            raise ValueError("occupancy proxies must be finite and non-negative")
        if self.n_coarse < 1 or self.n_fine < 1:
            raise ValueError(f"sample counts must be >= 1, got {self.n_coarse}, {self.n_fine}")

    @classmethod
    def empty(cls, resolution: int = 32, n_coarse: int = 32, n_fine: int = 32, aabb=DEFAULT_AABB) -> "SamplerParams":
        return cls(np.zeros((resolution,) * 3), n_coarse, n_fine, aabb)

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    @property
    def n_samples(self) -> int:
        return self.n_coarse + self.n_fine

    def copy(self) -> "SamplerParams":
        return SamplerParams(self.grid.copy(), self.n_coarse, self.n_fine, self.aabb)

    def proxy(self, points) -> np.ndarray:
        """Nearest-cell occupancy value at world points (..., 3)."""
        lo, hi = (np.asarray(a) for a in self.aabb)
        R = self.resolution
        idx = np.floor((np.asarray(points) - lo) / (hi - lo) * R).astype(np.intp)
        idx = np.clip(idx, 0, R - 1)
        return self.grid[idx[..., 0], idx[..., 1], idx[..., 2]]

    def cell_points(self, sub: int = 2) -> np.ndarray:
        """``sub^3`` evenly spaced points inside every cell, shape (R, R, R, sub^3, 3)."""
        lo, hi = (np.asarray(a) for a in self.aabb)
        R = self.resolution
        cell = (hi - lo) / R
        offs = (np.arange(sub) + 0.5) / sub
        local = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), -1).reshape(-1, 3)
        ijk = np.stack(np.meshgrid(*(np.arange(R),) * 3, indexing="ij"), -1)
        return lo + (ijk[..., None, :] + local) * cell

    def refreshed(self, params: FieldParams, sub: int = 2, chunk: int = 65536) -> "SamplerParams":
        """New sampler whose grid holds the field's max density in each cell."""
        pts = self.cell_points(sub).reshape(-1, 3)
        sigma = np.concatenate([field_density(pts[i : i + chunk], params) for i in range(0, len(pts), chunk)])
        R = self.resolution
        grid = sigma.astype(np.float64).reshape(R, R, R, sub**3).max(axis=-1)
        return SamplerParams(grid, self.n_coarse, self.n_fine, self.aabb)

    def state(self) -> dict:
        return {"sampler.grid": self.grid.astype(np.float32)}

    def meta(self) -> dict:
        return {"n_coarse": self.n_coarse, "n_fine": self.n_fine, "aabb": self.aabb}

    @classmethod
    def from_state(cls, tensors: dict, meta: dict) -> "SamplerParams":
        return cls(tensors["sampler.grid"], int(meta["n_coarse"]), int(meta["n_fine"]), tuple(map(tuple, meta["aabb"])))


@dataclass
class SampleBatch:
    """Samples for the rays that hit the scene box.

    ``ray_index`` maps each row back to the caller's ray list; rays that miss
    the box have no row.
    """

    t: np.ndarray  # (R, S)
    deltas: np.ndarray  # (R, S)
    positions: np.ndarray  # (R, S, 3)
    dirs: np.ndarray  # (R, 3)
    ray_index: np.ndarray  # (R,)
    n_rays: int
    is_fine: Optional[np.ndarray] = None  # (R, S) True for importance samples

    def __len__(self) -> int:
        return len(self.ray_index)


def _offsets(rng, shape, default):
    return np.full(shape, default) if rng is None else rng.random(shape)


def sample_rays(origins, dirs, sampler: SamplerParams, rng: Optional[np.random.Generator] = None) -> SampleBatch:
    """Place ``n_coarse + n_fine`` samples on every ray that hits the box.

    Coarse samples are stratified on ``[t_near, t_far]``. Transmittance
    weights from the occupancy grid at the coarse samples, floored at
    ``WEIGHT_FLOOR``, define a piecewise-constant pdf over the strata from
    which fine samples are drawn by stratified inverse-CDF sampling.
    Without ``rng`` fixed in-stratum offsets are used.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_near, t_far, hit = ray_aabb(origins, dirs, sampler.aabb)
    idx = np.flatnonzero(hit)
    o, d = origins[idx], dirs[idx]
    tn, tf = t_near[idx][:, None], t_far[idx][:, None]
    n, nc, nf = len(idx), sampler.n_coarse, sampler.n_fine

    width = (tf - tn) / nc
    edges = tn + width * np.arange(nc + 1)
    t_coarse = edges[:, :-1] + width * _offsets(rng, (n, nc), COARSE_OFFSET)

    sigma = sampler.proxy(o[:, None, :] + t_coarse[..., None] * d[:, None, :])
    tau = sigma * width
    trans = np.exp(-(np.cumsum(tau, axis=1) - tau))
    w = trans * (1.0 - np.exp(-tau)) + WEIGHT_FLOOR
    cdf = np.concatenate([np.zeros((n, 1)), np.cumsum(w, axis=1)], axis=1)
    cdf /= cdf[:, -1:]

    u = (np.arange(nf) + _offsets(rng, (n, nf), FINE_OFFSET)) / nf
    # row-wise searchsorted via a per-row offset
    shift = np.arange(n)[:, None] * 2.0
    b = np.searchsorted((cdf[:, 1:] + shift).ravel(), (u + shift).ravel(), side="right").reshape(n, nf)
    b = np.clip(b - np.arange(n)[:, None] * nc, 0, nc - 1)
    c0 = np.take_along_axis(cdf, b, axis=1)
    c1 = np.take_along_axis(cdf, b + 1, axis=1)
    frac = np.clip((u - c0) / np.maximum(c1 - c0, 1e-300), 0.0, 1.0)
    t_fine = np.take_along_axis(edges, b, axis=1) + frac * width

    t = np.concatenate([t_coarse, t_fine], axis=1)
    order = np.argsort(t, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    is_fine = order >= nc
    deltas = np.concatenate([np.diff(t, axis=1), tf - t[:, -1:]], axis=1)
    lo, hi = (np.asarray(a) for a in sampler.aabb)
    pos = np.clip(o[:, None, :] + t[..., None] * d[:, None, :], lo, hi)
    return SampleBatch(t, deltas, pos, d, idx, len(origins), is_fine)


def sample_ray(ray, sampler: SamplerParams, rng: Optional[np.random.Generator] = None) -> list:
    """Samples of a single :class:`~cuevis.geometry.Ray` as :class:`SamplePoint` objects."""
    batch = sample_rays(ray.origin[None], ray.direction[None], sampler, rng)
    if len(batch) == 0:
        return []
    theta, phi = direction_to_angles(batch.dirs[0])
    return [
        SamplePoint(tuple(p), float(theta), float(phi), float(dl))
        for p, dl in zip(batch.positions[0], batch.deltas[0])
    ]
