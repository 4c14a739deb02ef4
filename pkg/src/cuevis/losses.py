"""Losses shared by estimator training and cue training.

All functions accept numpy arrays or tensors and return a scalar
:class:`~cuevis.autodiff.Tensor`; batched inputs are averaged over the
leading axis.
"""
from __future__ import annotations

import numpy as np

from cuevis.autodiff import Tensor, ops
from cuevis.geometry import Pose

DEFAULT_LOSS_WEIGHTS = (0.01, 0.01)


def _split_pose(p):
    if isinstance(p, Pose):
        return p.q, p.t
    q, t = p
    return q, t


def orientation_loss(q_hat, q) -> Tensor:
    """Per-sample geodesic angle in radians, ``2 acos |<q_hat, q>|``."""
    q_hat = ops.as_tensor(q_hat)
    q = ops.as_tensor(q, q_hat)
    dot = ops.sum(ops.mul(q_hat, q), axis=-1)
    return ops.mul(ops.arccos(ops.absolute(dot)), np.asarray(2.0, dtype=q_hat.dtype))


def speed_loss(pred, label) -> Tensor:
    """Angular error (radians) plus translation error relative to ``|t|``.

    ``pred`` and ``label`` are :class:`Pose` objects or ``(q, t)`` pairs with
    shapes (4,), (3,) or batched (B, 4), (B, 3).
    """
    q_hat, t_hat = _split_pose(pred)
    q, t = _split_pose(label)
    t_hat = ops.as_tensor(t_hat)
    t_label = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=t_hat.dtype)
    t_norm = np.linalg.norm(t_label, axis=-1)
    if np.any(t_norm == 0):
        raise ValueError("speed_loss: label translation has zero norm")
    trans = ops.div(ops.norm(ops.sub(t_hat, t_label), axis=-1), t_norm)
    return ops.mean(ops.add(orientation_loss(q_hat, q), trans))


def heatmap_l2_loss(pred, target) -> Tensor:
    """Mean squared difference over every heatmap entry."""
    pred = ops.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"heatmap_l2_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = ops.sub(pred, target)
    return ops.mean(ops.mul(diff, diff))


def combined_cue_loss(pred_pose, pred_heatmaps, label_pose, target_heatmaps, weights=DEFAULT_LOSS_WEIGHTS) -> Tensor:
    """``w_hm * heatmap_l2 + w_pose * speed_loss``.

    A zero weight drops its term from the graph entirely, which is how the
    single-supervision ablations are run.
    """
    w_hm, w_pose = weights
    if w_hm < 0 or w_pose < 0:
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    terms = []
    if w_hm > 0:
        terms.append(ops.mul(heatmap_l2_loss(pred_heatmaps, target_heatmaps), w_hm))
    if w_pose > 0:
        terms.append(ops.mul(speed_loss(pred_pose, label_pose), w_pose))
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return total
