"""Confidence-model supervision: track-level TP/FP labels from mean 3D IoU
against ground truth, the IoU regression target, and score fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from offtrack.config import ObjectClass
from offtrack.geom import iou_3d

POSITIVE = "positive"
NEGATIVE = "negative"
IGNORE = "ignore"


def _default_tau():
    return {ObjectClass.VEHICLE: (0.7, 0.35),
            ObjectClass.PEDESTRIAN: (0.5, 0.25),
            ObjectClass.CYCLIST: (0.5, 0.25)}


@dataclass(frozen=True)
class CrmLabelRule:
    """Per-class (tau_high, tau_low) IoU bounds for positive/negative."""

    tau: dict = field(default_factory=_default_tau)

    def __post_init__(self):
        for cls, (hi, lo) in self.tau.items():
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"need 0 <= tau_l < tau_h <= 1 for {cls.label}")

    def bounds(self, cls: ObjectClass):
        return self.tau[cls]


@dataclass(frozen=True)
class ScorePair:
    s_cls: float
    s_iou: float

    def __post_init__(self):
        for v in (self.s_cls, self.s_iou):
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"scores must be finite in [0, 1], got {v}")


def mean_best_iou(track, gt_tracks) -> float:
    """Mean over the track's updated entries of the best same-class 3D IoU
    against any ground-truth box in the same frame (0 when none overlap)."""
    gt_by_frame = {}
    for gt in gt_tracks:
        if gt.class_id != track.class_id:
            continue
        for e in gt.entries:
            gt_by_frame.setdefault(e.frame_index, []).append(e.box)
    total, count = 0.0, 0
    for e in track.updated_entries():
        candidates = gt_by_frame.get(e.frame_index, [])
        best = max((iou_3d(e.box, g) for g in candidates), default=0.0)
        total += best
        count += 1
    return total / count if count else 0.0


def crm_labels(track, gt_tracks, rule: CrmLabelRule,
               refined_track=None):
    """(label, iou_target) for one track.

    The classification label comes from the tracked boxes' mean best-match
    3D IoU (> tau_h positive, < tau_l negative, else ignore); the regression
    target is the same statistic measured on the geometry/position-refined
    boxes when available.
    """
    tau_h, tau_l = rule.bounds(track.class_id)
    mean_iou = mean_best_iou(track, gt_tracks)
    if mean_iou > tau_h:
        label = POSITIVE
    elif mean_iou < tau_l:
        label = NEGATIVE
    else:
        label = IGNORE
    target_track = refined_track if refined_track is not None else track
    iou_target = mean_best_iou(target_track, gt_tracks) \
        if refined_track is not None else mean_iou
    return label, iou_target


def fuse_score(pair: ScorePair) -> float:
    """sqrt(s_cls^2 + s_iou^2), range [0, sqrt(2)]; used for ranking.

    Values above 1 are kept here; the label exporter normalizes by sqrt(2)
    when clamping to [0, 1] for output files.
    """
    return math.sqrt(pair.s_cls ** 2 + pair.s_iou ** 2)
