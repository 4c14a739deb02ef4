"""Labelled image datasets on disk.

Layout of a dataset directory::

    manifest.jsonl      one record per line
    dataset.json        generation settings (seed, camera, split ratios)
    images/000000.png   8-bit RGB
    masks/000000.png    8-bit grayscale, 0 or 255
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from cuevis.geometry import DEFAULT_INTRINSICS, CameraIntrinsics, Pose, project_points
from cuevis.scene.poses import PoseRange, sample_light, sample_pose
from cuevis.scene.raytrace import keypoint_visibility, raytrace_reference
from cuevis.scene.spacecraft import SpacecraftModel

MANIFEST = "manifest.jsonl"
SETTINGS = "dataset.json"


@dataclass
class DatasetRecord:
    image: str
    mask: str
    q: list
    t: list
    keypoints: list
    split: str

    @property
    def pose(self) -> Pose:
        return Pose.from_arrays(self.q, self.t)

    @property
    def keypoints_2d(self) -> np.ndarray:
        return np.asarray(self.keypoints, dtype=np.float64)[:, :2]

    @property
    def visibility(self) -> np.ndarray:
        return np.asarray(self.keypoints, dtype=np.float64)[:, 2] > 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass(frozen=True)
class DatasetConfig:
    split: tuple = (0.9, 0.05, 0.05)
    distance: tuple = (6.0, 14.0)
    margin_px: float = 10.0
    light_cone_deg: float = 60.0
    fx: float = DEFAULT_INTRINSICS.fx
    fy: float = DEFAULT_INTRINSICS.fy
    width: int = DEFAULT_INTRINSICS.width
    height: int = DEFAULT_INTRINSICS.height

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)


def split_counts(n: int, ratios: Sequence[float]) -> tuple:
    total = float(sum(ratios))
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: Path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def render_record(index: int, seed: int, config: DatasetConfig, model: SpacecraftModel):
    """Pose, light, image and mask for one record; depends only on (seed, index)."""
    rng = np.random.default_rng([seed, index])
    K = config.intrinsics
    pose = sample_pose(rng, K, PoseRange(config.distance, config.margin_px))
    light = sample_light(rng, config.light_cone_deg)
    image, mask = raytrace_reference(pose, K, model, light)
    return pose, light, to_uint8(image), mask


def build_dataset(
    n_images: int,
    seed: int,
    out_dir,
    config: Optional[DatasetConfig] = None,
    model: Optional[SpacecraftModel] = None,
    threads: int = 1,
) -> Path:
    """Ray-trace ``n_images`` labelled views and write the manifest.

    Records are rendered in parallel but written in index order, so the
    output is identical for any thread count.
    """
    config = DatasetConfig() if config is None else config
    model = SpacecraftModel() if model is None else model
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = config.intrinsics
    n_train, n_val, _ = split_counts(n_images, config.split)

    def work(k):
        pose, _, image, mask = render_record(k, seed, config, model)
        image_rel, mask_rel = f"images/{k:06d}.png", f"masks/{k:06d}.png"
        save_png(out / image_rel, image)
        save_png(out / mask_rel, (mask * 255).astype(np.uint8))
        uv = project_points(pose, K, model.keypoints)
        vis = keypoint_visibility(pose, K, model)
        split = "train" if k < n_train else "val" if k < n_train + n_val else "test"
        return DatasetRecord(
            image=image_rel,
            mask=mask_rel,
            q=[float(v) for v in pose.q],
            t=[float(v) for v in pose.t],
            keypoints=[[float(u), float(v), int(s)] for (u, v), s in zip(uv, vis)],
            split=split,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, range(n_images)))
    else:
        records = [work(k) for k in range(n_images)]

    manifest = out / MANIFEST
    manifest.write_text("".join(r.to_json() + "\n" for r in records))
    settings = {"seed": int(seed), "n_images": int(n_images), "config": asdict(config)}
    (out / SETTINGS).write_text(json.dumps(settings, indent=1, sort_keys=True))
    return manifest


def load_manifest(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    return [DatasetRecord(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def load_settings(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / SETTINGS).read_text())


def regenerate_record(dataset_dir, index: int, model: Optional[SpacecraftModel] = None):
    """Re-render record ``index`` from the stored seed; returns (image uint8, mask bool)."""
    settings = load_settings(dataset_dir)
    cfg = dict(settings["config"])
    cfg["split"], cfg["distance"] = tuple(cfg["split"]), tuple(cfg["distance"])
    model = SpacecraftModel() if model is None else model
    _, _, image, mask = render_record(index, settings["seed"], DatasetConfig(**cfg), model)
    return image, mask


@dataclass
class LoadedSplit:
    """Decoded arrays for one split of a dataset."""

    records: list
    images: np.ndarray  # (N, H, W, 3) uint8
    masks: np.ndarray  # (N, H, W) bool
    q: np.ndarray = field(init=False)
    t: np.ndarray = field(init=False)

    def __post_init__(self):
        self.q = np.array([r.q for r in self.records], dtype=np.float64).reshape(-1, 4)
        self.t = np.array([r.t for r in self.records], dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def poses(self) -> list:
        return [r.pose for r in self.records]

    @property
    def keypoints_2d(self) -> np.ndarray:
        return np.array([r.keypoints_2d for r in self.records])


def load_split(dataset_dir, split: Optional[str] = "train", limit: Optional[int] = None) -> LoadedSplit:
    root = Path(dataset_dir)
    records = [r for r in load_manifest(root) if split is None or r.split == split]
    if limit is not None:
        records = records[:limit]
    if not records:
        raise ValueError(f"{root}: no records in split {split!r}")
    images = np.stack([load_png(root / r.image) for r in records])
    masks = np.stack([load_png(root / r.mask) > 127 for r in records])
    return LoadedSplit(records, images, masks)
