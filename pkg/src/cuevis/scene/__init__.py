"""Procedural spacecraft scene, reference ray tracer and dataset I/O."""
from cuevis.scene.dataset import (
    DatasetConfig,
    DatasetRecord,
    LoadedSplit,
    build_dataset,
    load_manifest,
    load_png,
    load_split,
    save_png,
)
from cuevis.scene.poses import EVAL_LIGHT, PoseRange, grid_poses, named_pose_set, sample_light, sample_pose
from cuevis.scene.raytrace import keypoint_visibility, raytrace_reference
from cuevis.scene.spacecraft import KEYPOINT_NAMES, KEYPOINTS, SpacecraftModel

__all__ = [
    "DatasetConfig",
    "DatasetRecord",
    "EVAL_LIGHT",
    "KEYPOINTS",
    "KEYPOINT_NAMES",
    "LoadedSplit",
    "PoseRange",
    "SpacecraftModel",
    "build_dataset",
    "grid_poses",
    "keypoint_visibility",
    "load_manifest",
    "load_png",
    "load_split",
    "named_pose_set",
    "raytrace_reference",
    "sample_light",
    "sample_pose",
    "save_png",
]
