"""Training loops and synthetic corpora for the three refiners.

All loops are deterministic per seed, drive Adam with the one-cycle
schedule, and abort to the last finished epoch's state if the loss goes
non-finite. Point-count hyperparameters default to desk-scale values so the
efficacy checks train in minutes on one core; the full-scale counts are a
config change (``query_points=256``, ``value_points=4096``).

Augmentations: geometry training flips the pooled box-local cloud along X/Y
(50% each), rotates it about Z by U[-pi/2, pi/2] with the proposal box held
axis-aligned (heading-error simulation), and scales points, proposal sizes
and the target size by U[0.9, 1.1]. Position training flips the reference
frame along X/Y and randomly deprecates frames. Confidence training
resamples positive and negative tracks 1:1 each epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from offtrack.config import ObjectClass
from offtrack.geom import Box3D, normalize_angle, to_box_local
from offtrack.nn import Adam, one_cycle_lr
from offtrack.objprep import (GeometryPointSet, ObjectSample, PositionPointSet,
                              extract_object_points)
from offtrack.refine.anchors import SizeAnchorTable, fit_size_anchors
from offtrack.refine.labels import IGNORE, NEGATIVE, POSITIVE, CrmLabelRule, crm_labels
from offtrack.refine.losses import (crm_loss, grm_loss, grm_loss_batch,
                                     prm_loss, prm_loss_batch, prm_targets)
from offtrack.refine.models import (ConfidenceRefiner, GeometryRefiner,
                                    PositionRefiner)
from offtrack.synth import ObjectSpec, ScenarioConfig, corrupt, generate
from offtrack.tracker import Track, TrackEntry


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 8
    batch_size: int = 16
    peak_lr: float = 1e-3
    query_count: int = 3
    query_points: int = 96
    value_points: int = 256
    frame_points: int = 48
    pos_value_points: int = 384
    augment: bool = True
    flip_prob: float = 0.5
    rotation_range: float = math.pi / 2
    scale_low: float = 0.9
    scale_high: float = 1.1
    frame_drop_prob: float = 0.1


@dataclass
class TrainResult:
    model: object
    epoch_losses: list
    aborted: bool = False


@dataclass
class GrmExample:
    sample: ObjectSample
    gt_size: np.ndarray


@dataclass
class PrmExample:
    sample: ObjectSample
    gt_boxes: list  # Box3D per frame, aligned with sample entries (or None)


@dataclass
class CrmExample:
    sample: ObjectSample
    label: float
    iou_target: float


# ---------------------------------------------------------------------------
# feature assembly with augmentation


def _local_frame_data(sample: ObjectSample):
    """Per non-empty frame: (box-local xyz, intensity, dims, score)."""
    out = []
    for i in sample.non_empty():
        box = sample.boxes[i]
        pts = sample.per_frame_points[i]
        out.append((to_box_local(box, pts[:, :3]), pts[:, 3].copy(),
                    box.size.copy(), sample.scores[i]))
    return out


def _p2s_axis_aligned(pts: np.ndarray, dims: np.ndarray) -> np.ndarray:
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    hl, hw, hh = dims / 2.0
    return np.stack([x - hl, -x - hl, y - hw, -y - hw, z - hh, -z - hh], axis=-1)


def _grm_training_set(example: GrmExample, hyper: TrainHyper,
                      rng: np.random.Generator):
    frames = _local_frame_data(example.sample)
    gt_size = example.gt_size.copy()
    if hyper.augment:
        flip_x = rng.uniform() < hyper.flip_prob
        flip_y = rng.uniform() < hyper.flip_prob
        theta = rng.uniform(-hyper.rotation_range, hyper.rotation_range)
        scale = rng.uniform(hyper.scale_low, hyper.scale_high)
    else:
        flip_x = flip_y = False
        theta, scale = 0.0, 1.0
    c, s = math.cos(theta), math.sin(theta)

    feats = []
    for pts, intensity, dims, score in frames:
        p = pts.copy()
        if flip_x:
            p[:, 0] = -p[:, 0]
        if flip_y:
            p[:, 1] = -p[:, 1]
        p[:, :2] = p[:, :2] @ np.array([[c, s], [-s, c]])
        p *= scale
        d = dims * scale
        rows = np.concatenate([p, intensity[:, None], _p2s_axis_aligned(p, d)],
                              axis=-1)
        feats.append((rows, d, score))
    gt_size *= scale

    pooled = np.vstack([rows for rows, _, _ in feats])
    value_rows = pooled[rng.integers(0, len(pooled), hyper.value_points)]

    chosen = rng.integers(0, len(feats), hyper.query_count)
    query_rows = np.empty((hyper.query_count, hyper.query_points, 11))
    query_sizes = np.empty((hyper.query_count, 3))
    for qi, fi in enumerate(chosen):
        rows, d, score = feats[fi]
        picked = rows[rng.integers(0, len(rows), hyper.query_points)]
        query_rows[qi] = np.concatenate(
            [picked, np.full((hyper.query_points, 1), score)], axis=-1)
        query_sizes[qi] = d
    gset = GeometryPointSet(query_rows, value_rows, query_sizes, list(chosen))
    return gset, gt_size


def _crm_training_set(example: CrmExample, hyper: TrainHyper,
                      rng: np.random.Generator) -> np.ndarray:
    frames = _local_frame_data(example.sample)
    chosen = rng.integers(0, len(frames), hyper.query_count)
    query_rows = np.empty((hyper.query_count, hyper.query_points, 11))
    for qi, fi in enumerate(chosen):
        pts, intensity, dims, score = frames[fi]
        idx = rng.integers(0, len(pts), hyper.query_points)
        rows = np.concatenate([pts[idx], intensity[idx, None],
                               _p2s_axis_aligned(pts[idx], dims),
                               np.full((hyper.query_points, 1), score)], axis=-1)
        query_rows[qi] = rows
    return query_rows


def _prm_training_set(example: PrmExample, hyper: TrainHyper,
                      rng: np.random.Generator):
    sample = example.sample
    n = sample.length
    ref_index = int(rng.integers(n))
    ref_box = sample.boxes[ref_index]
    flip_x = hyper.augment and rng.uniform() < hyper.flip_prob
    flip_y = hyper.augment and rng.uniform() < hyper.flip_prob

    def localize_box(box: Box3D) -> Box3D:
        center = to_box_local(ref_box, box.center.reshape(1, 3))[0]
        cx, cy, cz = center
        yaw = box.yaw - ref_box.yaw
        if flip_x:
            cx, yaw = -cx, math.pi - yaw
        if flip_y:
            cy, yaw = -cy, -yaw
        return Box3D(cx, cy, cz, box.l, box.w, box.h, normalize_angle(yaw))

    drop = np.zeros(n, dtype=bool)
    if hyper.augment:
        drop = rng.uniform(size=n) < hyper.frame_drop_prob
        if drop.all():
            drop[:] = False

    rows = np.zeros((n, hyper.frame_points, 32))
    valid = np.zeros(n, dtype=bool)
    boxes_local = np.zeros((n, 7))
    gt_local = np.zeros((n, 7))
    supervised = np.zeros(n, dtype=bool)
    scores = np.zeros(n)
    from offtrack.objprep import p2co_encode
    for i in range(n):
        local_box = localize_box(sample.boxes[i])
        boxes_local[i] = local_box.to_array()
        scores[i] = sample.scores[i]
        if example.gt_boxes[i] is not None:
            gt_local[i] = localize_box(example.gt_boxes[i]).to_array()
        pts = sample.per_frame_points[i]
        if drop[i] or not len(pts):
            continue
        picked = pts[rng.integers(0, len(pts), hyper.frame_points)]
        local = to_box_local(ref_box, picked[:, :3])
        if flip_x:
            local[:, 0] = -local[:, 0]
        if flip_y:
            local[:, 1] = -local[:, 1]
        offsets = p2co_encode(local, local_box)
        rows[i] = np.concatenate(
            [local, picked[:, 3:4], offsets,
             np.full((hyper.frame_points, 1), sample.scores[i])], axis=-1)
        valid[i] = True
        supervised[i] = example.gt_boxes[i] is not None
    if not valid.any():
        raise ValueError("prm example lost all frames")
    pset = PositionPointSet(rows, valid, boxes_local, scores, n)
    pooled = rows[valid].reshape(-1, 32)
    value_rows = pooled[rng.integers(0, len(pooled), hyper.pos_value_points)]
    return pset, value_rows, gt_local, supervised & valid


# ---------------------------------------------------------------------------
# loops


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _run_training(model, examples, hyper: TrainHyper, seed: int,
                  batch_loss) -> TrainResult:
    """Shared loop: batched Adam with one-cycle lr and NaN abort.

    ``batch_loss(batch_examples, rng)`` returns a scalar Tensor, the mean
    loss over the batch.
    """
    model.set_training(True)
    opt = Adam(model.named_parameters(), hyper.peak_lr)
    rng = np.random.default_rng([seed, 17])
    n = len(examples)
    steps_per_epoch = max(1, (n + hyper.batch_size - 1) // hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    step = 0
    losses = []
    snapshot = {k: v.copy() for k, v in model.state_arrays().items()}
    for _ in range(hyper.epochs):
        epoch_total = 0.0
        epoch_count = 0
        for batch in _epoch_batches(n, hyper.batch_size, rng):
            opt.zero_grad()
            loss = batch_loss([examples[int(i)] for i in batch], rng)
            value = loss.item()
            if not math.isfinite(value):
                model.load_state_arrays(snapshot)
                model.set_training(False)
                return TrainResult(model, losses, aborted=True)
            loss.backward()
            opt.step(lr=one_cycle_lr(step, total_steps, hyper.peak_lr))
            step += 1
            epoch_total += value
            epoch_count += 1
        losses.append(epoch_total / epoch_count)
        snapshot = {k: v.copy() for k, v in model.state_arrays().items()}
    model.set_training(False)
    return TrainResult(model, losses)


def train_grm(examples, anchors: SizeAnchorTable, hyper: TrainHyper,
              seed: int, **model_kw) -> TrainResult:
    model = GeometryRefiner(anchors, np.random.default_rng([seed, 0]), **model_kw)

    def batch_loss(batch, rng):
        sets = [_grm_training_set(ex, hyper, rng) for ex in batch]
        query_rows = np.stack([g.query_rows for g, _ in sets])
        query_sizes = np.stack([g.query_sizes for g, _ in sets])
        value_rows = np.stack([g.value_rows for g, _ in sets])
        gt_sizes = np.stack([gt for _, gt in sets])
        logits, residuals = model.forward_rows(query_rows, query_sizes, value_rows)
        return grm_loss_batch(logits, residuals, gt_sizes, model.anchor_table)

    return _run_training(model, examples, hyper, seed, batch_loss)


def train_prm(examples, hyper: TrainHyper, seed: int, **model_kw) -> TrainResult:
    """All examples must share one frame count so tracks stack into batches
    (batch statistics across tracks are what make eval-mode BN valid)."""
    lengths = {ex.sample.length for ex in examples}
    if len(lengths) != 1:
        raise ValueError(f"position training needs equal-length tracks, got {lengths}")
    model = PositionRefiner(np.random.default_rng([seed, 1]), **model_kw)

    def batch_loss(batch, rng):
        sets = [_prm_training_set(ex, hyper, rng) for ex in batch]
        rows = np.stack([s[0].rows for s in sets])
        valid = np.stack([s[0].valid_mask for s in sets])
        values = np.stack([s[1] for s in sets])
        offsets, bin_logits, bin_residuals = model.forward_rows(rows, valid, values)
        targets = [prm_targets(s[0].boxes_local, s[2]) for s in sets]
        t_off = np.stack([t[0] for t in targets])
        t_bins = np.stack([t[1] for t in targets])
        t_res = np.stack([t[2] for t in targets])
        supervised = np.stack([s[3] for s in sets])
        return prm_loss_batch(offsets, bin_logits, bin_residuals,
                              t_off, t_bins, t_res, supervised)

    return _run_training(model, examples, hyper, seed, batch_loss)


def train_crm(examples, hyper: TrainHyper, seed: int, **model_kw) -> TrainResult:
    model = ConfidenceRefiner(np.random.default_rng([seed, 2]), **model_kw)
    positives = [e for e in examples if e.label >= 0.5]
    negatives = [e for e in examples if e.label < 0.5]
    if not positives or not negatives:
        raise ValueError("confidence training needs both positive and negative tracks")
    balance_rng = np.random.default_rng([seed, 18])

    def batch_loss(batch, rng):
        rows = np.stack([_crm_training_set(ex, hyper, rng) for ex in batch])
        labels = np.array([[ex.label] for ex in batch])
        targets = np.array([[ex.iou_target] for ex in batch])
        logit_cls, logit_iou = model.forward(rows)
        from offtrack.nn import bce_with_logits
        return bce_with_logits(logit_cls, labels) + bce_with_logits(logit_iou, targets)

    # 1:1 epoch resampling: run the shared loop one epoch at a time over a
    # fresh balanced draw, keeping one optimizer across epochs.
    model.set_training(True)
    opt = Adam(model.named_parameters(), hyper.peak_lr)
    n_side = min(len(positives), len(negatives))
    steps_per_epoch = max(1, (2 * n_side + hyper.batch_size - 1) // hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    rng = np.random.default_rng([seed, 19])
    step = 0
    losses = []
    snapshot = {k: v.copy() for k, v in model.state_arrays().items()}
    for _ in range(hyper.epochs):
        pos = [positives[int(i)] for i in
               balance_rng.choice(len(positives), n_side, replace=False)]
        neg = [negatives[int(i)] for i in
               balance_rng.choice(len(negatives), n_side, replace=False)]
        epoch_examples = pos + neg
        epoch_total, epoch_count = 0.0, 0
        for batch in _epoch_batches(len(epoch_examples), hyper.batch_size, rng):
            opt.zero_grad()
            loss = batch_loss([epoch_examples[int(i)] for i in batch], rng)
            value = loss.item()
            if not math.isfinite(value):
                model.load_state_arrays(snapshot)
                model.set_training(False)
                return TrainResult(model, losses, aborted=True)
            loss.backward()
            opt.step(lr=one_cycle_lr(step, total_steps, hyper.peak_lr))
            step += 1
            epoch_total += value
            epoch_count += 1
        losses.append(epoch_total / epoch_count)
        snapshot = {k: v.copy() for k, v in model.state_arrays().items()}
    model.set_training(False)
    return TrainResult(model, losses)


# ---------------------------------------------------------------------------
# synthetic corpora


_SIZE_RANGES = {
    ObjectClass.VEHICLE: ((3.6, 5.4), (1.7, 2.2), (1.4, 1.9)),
    ObjectClass.PEDESTRIAN: ((0.6, 1.0), (0.6, 1.0), (1.5, 1.9)),
    ObjectClass.CYCLIST: ((1.5, 2.0), (0.6, 0.9), (1.5, 1.9)),
}


def _random_object(rng, cls: ObjectClass, moving: bool):
    ranges = _SIZE_RANGES[cls]
    size = tuple(rng.uniform(lo, hi) for lo, hi in ranges)
    start = (rng.uniform(6.0, 28.0), rng.uniform(-12.0, 12.0), size[2] / 2.0)
    yaw = rng.uniform(-math.pi, math.pi)
    if not moving:
        return ObjectSpec(cls, size, start, yaw=yaw)
    if rng.uniform() < 0.5:
        return ObjectSpec(cls, size, start, yaw=yaw, motion="line",
                          speed=rng.uniform(1.0, 6.0))
    return ObjectSpec(cls, size, start, yaw=yaw, motion="arc",
                      speed=rng.uniform(1.0, 6.0),
                      arc_rate=rng.choice([-1.0, 1.0]) * rng.uniform(0.05, 0.25))


def _noisy_track(gt_track: Track, rng, center_sigma, size_sigma, yaw_sigma) -> Track:
    entries = []
    for e in gt_track.entries:
        b = e.box
        center = b.center + center_sigma * rng.normal(size=3)
        size = np.maximum(b.size + size_sigma * rng.normal(size=3), 0.2)
        yaw = b.yaw + yaw_sigma * rng.normal()
        entries.append(TrackEntry(e.frame_index,
                                  Box3D(center[0], center[1], center[2],
                                        size[0], size[1], size[2], yaw),
                                  float(rng.uniform(0.5, 1.0)), True))
    return replace(gt_track, entries=entries)


def _single_object_sample(rng, cls, moving, frame_count, center_sigma,
                          size_sigma, yaw_sigma, density, seed):
    spec = _random_object(rng, cls, moving)
    cfg = ScenarioConfig(objects=(spec,), frame_count=frame_count,
                         points_per_m2_at_10m=density, seed=seed)
    bundle = generate(cfg)
    gt = bundle.gt_tracks[0]
    noisy = _noisy_track(gt, rng, center_sigma, size_sigma, yaw_sigma)
    sample = extract_object_points(noisy, bundle.frames)
    return sample, gt, noisy, spec


def build_grm_corpus(count: int, seed: int, cls=ObjectClass.VEHICLE,
                     frame_count: int = 10, center_sigma: float = 0.15,
                     size_sigma: float = 0.3, yaw_sigma: float = 0.05,
                     density: float = 40.0):
    """Rigid objects with noisy per-frame proposals; target is the true size."""
    rng = np.random.default_rng([seed, 30])
    out = []
    i = 0
    while len(out) < count:
        sample, gt, _, spec = _single_object_sample(
            rng, cls, moving=True, frame_count=frame_count,
            center_sigma=center_sigma, size_sigma=size_sigma,
            yaw_sigma=yaw_sigma, density=density, seed=seed * 100003 + i)
        i += 1
        if sample.non_empty():
            out.append(GrmExample(sample, np.array(spec.size)))
    return out


def build_prm_corpus(count: int, seed: int, cls=ObjectClass.VEHICLE,
                     frame_count: int = 40, center_sigma: float = 0.15,
                     size_sigma: float = 0.1, yaw_sigma: float = 0.1,
                     density: float = 30.0):
    """Jittered trajectories of moving objects; targets are the gt boxes."""
    rng = np.random.default_rng([seed, 31])
    out = []
    i = 0
    while len(out) < count:
        sample, gt, _, _ = _single_object_sample(
            rng, cls, moving=True, frame_count=frame_count,
            center_sigma=center_sigma, size_sigma=size_sigma,
            yaw_sigma=yaw_sigma, density=density, seed=seed * 100019 + i)
        i += 1
        if len(sample.non_empty()) >= frame_count // 2:
            out.append(PrmExample(sample, [e.box for e in gt.entries]))
    return out


def build_crm_corpus(count: int, seed: int, cls=ObjectClass.VEHICLE,
                     frame_count: int = 12, density: float = 40.0,
                     rule: "CrmLabelRule | None" = None):
    """Half accurate tracks (positives), half offset ghost tracks whose
    boxes only clip the object (negatives); labels come from crm_labels so
    the corpus is honестly labeled, and ignores are skipped."""
    rule = rule or CrmLabelRule()
    rng = np.random.default_rng([seed, 32])
    out = []
    i = 0
    while len(out) < count:
        want_positive = len(out) % 2 == 0
        spec = _random_object(rng, cls, moving=False)
        cfg = ScenarioConfig(objects=(spec,), frame_count=frame_count,
                             points_per_m2_at_10m=density,
                             seed=seed * 100043 + i)
        i += 1
        bundle = generate(cfg)
        gt = bundle.gt_tracks[0]
        if want_positive:
            track = _noisy_track(gt, rng, 0.05, 0.05, 0.02)
        else:
            offset = rng.uniform(1.2, 3.0) * rng.choice([-1.0, 1.0], size=2)
            entries = []
            for e in gt.entries:
                b = e.box
                entries.append(TrackEntry(
                    e.frame_index,
                    Box3D(b.cx + offset[0], b.cy + offset[1], b.cz,
                          b.l, b.w, b.h, b.yaw + rng.normal(0, 0.3)),
                    float(rng.uniform(0.2, 0.8)), True))
            track = replace(gt, entries=entries)
        sample = extract_object_points(track, bundle.frames)
        if not sample.non_empty():
            continue
        label, iou_target = crm_labels(track, [gt], rule)
        if label == IGNORE:
            continue
        if want_positive != (label == POSITIVE):
            continue
        out.append(CrmExample(sample, 1.0 if label == POSITIVE else 0.0,
                              iou_target))
    return out


def anchors_from_examples(examples, k: int = 3, seed: int = 0) -> SizeAnchorTable:
    return fit_size_anchors(np.array([e.gt_size for e in examples]), k, seed)
