"""Cue training: the field optimised through the frozen estimator."""
from cuevis.cues.evaluate import CueEvaluation, cue_images, eval_cues, image_grid, read_eval, reference_views, write_eval
from cuevis.cues.model import CueGenerator
from cuevis.cues.trainer import (
    CueTrainConfig,
    CueTrainResult,
    GradAccumulator,
    cue_loss,
    cue_step,
    cue_train,
    initial_generator,
    pose_schedule,
    read_log,
    render_cue,
    render_mask,
    upsample_support,
    write_log,
)

__all__ = [
    "CueEvaluation",
    "CueGenerator",
    "CueTrainConfig",
    "CueTrainResult",
    "GradAccumulator",
    "cue_images",
    "cue_loss",
    "cue_step",
    "cue_train",
    "eval_cues",
    "image_grid",
    "initial_generator",
    "pose_schedule",
    "read_eval",
    "read_log",
    "reference_views",
    "render_cue",
    "render_mask",
    "upsample_support",
    "write_eval",
    "write_log",
]
