"""Training objectives.

Geometry: 0.1 * size-class cross-entropy + 2 * L1 on the true class's
residual. Position: L1 on center offsets + 0.1 * heading-bin cross-entropy
+ 2 * L1 on the true bin's residual (normalized by the bin half-width),
averaged over supervised frames only. Confidence: BCE on both branches.
"""

from __future__ import annotations

import numpy as np

from offtrack.nn import Tensor, bce_with_logits, cross_entropy_with_logits
from offtrack.refine.anchors import SizeAnchorTable
from offtrack.refine.heading import CODEC, HALF_BIN

GRM_CLS_WEIGHT = 0.1
GRM_REG_WEIGHT = 2.0
PRM_YAW_CLS_WEIGHT = 0.1
PRM_YAW_REG_WEIGHT = 2.0


def grm_loss(logits: Tensor, residuals: Tensor, gt_size,
             anchors: SizeAnchorTable) -> Tensor:
    """Per-query supervision against the anchor nearest the gt size."""
    t = logits.shape[0]
    target = anchors.nearest(gt_size)
    cls = cross_entropy_with_logits(logits, np.full(t, target))
    picked = residuals.narrow(1, target, 1).reshape((t, 3))
    target_residual = np.asarray(gt_size, dtype=np.float64) - anchors.anchors[target]
    reg = (picked - Tensor(target_residual)).abs().mean()
    return cls * GRM_CLS_WEIGHT + reg * GRM_REG_WEIGHT


def grm_loss_batch(logits: Tensor, residuals: Tensor, gt_sizes: np.ndarray,
                   anchors: SizeAnchorTable) -> Tensor:
    """Batch mean of grm_loss over stacked examples: logits (B, t, A),
    residuals (B, t, A, 3), gt_sizes (B, 3)."""
    b, t, a = logits.shape
    targets = np.array([anchors.nearest(g) for g in gt_sizes])
    cls = cross_entropy_with_logits(logits, np.tile(targets[:, None], (1, t)))
    pick = np.zeros((b, 1, a, 1))
    pick[np.arange(b), 0, targets, 0] = 1.0
    picked = (residuals * Tensor(pick)).sum(axis=2)  # (B, t, 3)
    target_residual = gt_sizes - anchors.anchors[targets]  # (B, 3)
    reg = (picked - Tensor(target_residual[:, None, :])).abs().mean()
    return cls * GRM_CLS_WEIGHT + reg * GRM_REG_WEIGHT


def prm_targets(boxes_local: np.ndarray, gt_boxes_local: np.ndarray):
    """Per-frame supervision targets in the reference frame.

    Returns (center offsets (L, 3), heading bins (L,), normalized heading
    residuals (L,)).
    """
    offsets = gt_boxes_local[:, :3] - boxes_local[:, :3]
    bins = np.empty(len(gt_boxes_local), dtype=np.int64)
    residuals = np.empty(len(gt_boxes_local))
    for i, yaw in enumerate(gt_boxes_local[:, 6]):
        b, r = CODEC.encode(float(yaw))
        bins[i] = b
        residuals[i] = r / HALF_BIN
    return offsets, bins, residuals


def prm_loss(offsets: Tensor, bin_logits: Tensor, bin_residuals: Tensor,
             target_offsets, target_bins, target_residuals,
             supervised: np.ndarray) -> Tensor:
    """Masked position loss; frames with supervised=False contribute zero."""
    mask = np.asarray(supervised, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("prm_loss needs at least one supervised frame")
    weights = Tensor(mask.astype(np.float64)[:, None] / count)

    center = ((offsets - Tensor(target_offsets)).abs() * weights).sum() * (1.0 / 3.0)

    onehot = np.zeros(bin_logits.shape)
    onehot[np.arange(len(target_bins)), target_bins] = 1.0
    from offtrack.nn import logsumexp
    log_z = logsumexp(bin_logits, axis=1, keepdims=True)
    picked_logit = (bin_logits * Tensor(onehot)).sum(axis=1, keepdims=True)
    yaw_cls = ((log_z - picked_logit) * weights).sum()

    picked_res = (bin_residuals * Tensor(onehot)).sum(axis=1, keepdims=True)
    yaw_reg = ((picked_res - Tensor(np.asarray(target_residuals)[:, None])).abs()
               * weights).sum()

    return center + yaw_cls * PRM_YAW_CLS_WEIGHT + yaw_reg * PRM_YAW_REG_WEIGHT


def prm_loss_batch(offsets: Tensor, bin_logits: Tensor, bin_residuals: Tensor,
                   target_offsets, target_bins, target_residuals,
                   supervised: np.ndarray) -> Tensor:
    """Batch mean of prm_loss over stacked tracks: offsets (B, L, 3), bin
    tensors (B, L, 12), targets shaped likewise, supervised (B, L)."""
    mask = np.asarray(supervised, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("every track in the batch needs a supervised frame")
    b = mask.shape[0]
    weights = Tensor(mask / counts[:, None] / b)  # (B, L)
    w3 = weights.reshape((b, -1, 1))

    center = ((offsets - Tensor(target_offsets)).abs() * w3).sum() * (1.0 / 3.0)

    onehot = np.zeros(bin_logits.shape)
    np.put_along_axis(onehot, np.asarray(target_bins)[..., None], 1.0, axis=-1)
    from offtrack.nn import logsumexp
    log_z = logsumexp(bin_logits, axis=-1, keepdims=True)
    picked_logit = (bin_logits * Tensor(onehot)).sum(axis=-1, keepdims=True)
    yaw_cls = ((log_z - picked_logit) * w3).sum()

    picked_res = (bin_residuals * Tensor(onehot)).sum(axis=-1, keepdims=True)
    yaw_reg = ((picked_res - Tensor(np.asarray(target_residuals)[..., None])).abs()
               * w3).sum()
    return center + yaw_cls * PRM_YAW_CLS_WEIGHT + yaw_reg * PRM_YAW_REG_WEIGHT


def crm_loss(logit_cls: Tensor, logit_iou: Tensor, label: float,
             iou_target: float) -> Tensor:
    return (bce_with_logits(logit_cls, np.array([label]))
            + bce_with_logits(logit_iou, np.array([iou_target])))
