"""Object-centric data preparation for the refining models.

For each track, points inside the (slightly scaled) tracked boxes are
cropped per frame. Two encodings follow:

- geometry-aware: each point carries signed distances to the six faces of
  its own frame's box, measured in that box's local frame (negative inside);
- position-aware: each point carries offsets to the box center and all
  eight canonical corners, again as box-frame quantities, which makes both
  encodings invariant under a rigid transform applied to point and box.

The geometry set pools every frame into one cloud of 4096 resampled rows
plus t query frames of 256 points each. The position set expresses the
whole track in one reference box's frame, 256 points per frame, padded with
zeros to 200 frames under a validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from offtrack.geom import Box3D, local_corners, points_in_box, to_box_local, transform_points

ROI_SCALE_DEFAULT = 1.1
GEOMETRY_VALUE_POINTS = 4096
QUERY_POINTS = 256
TRACK_PAD_LENGTH = 200
POSITION_VALUE_POINTS = 2048
GEOMETRY_QUERY_COUNT = 3

TRAINING = "training"
INFERENCE = "inference"


class EmptySampleError(ValueError):
    """The track has no points in any frame; caller should pass it through."""


@dataclass
class ObjectSample:
    """Per-track cropped point data, aligned with the track's entries."""

    track_id: int
    class_id: object
    frame_indices: list
    boxes: list
    scores: list
    per_frame_points: list  # world coordinates, (M_i, 5) each

    def non_empty(self) -> list:
        return [i for i, p in enumerate(self.per_frame_points) if len(p)]

    @property
    def length(self) -> int:
        return len(self.boxes)


@dataclass
class GeometryPointSet:
    query_rows: np.ndarray   # (t, 256, 11)
    value_rows: np.ndarray   # (4096, 10)
    query_sizes: np.ndarray  # (t, 3) proposal dimensions of the query frames
    query_frames: list       # entry indices the queries came from

    @property
    def t(self) -> int:
        return self.query_rows.shape[0]

    @property
    def n(self) -> int:
        return self.value_rows.shape[0]


@dataclass
class PositionPointSet:
    rows: np.ndarray         # (200, 256, 32)
    valid_mask: np.ndarray   # (200,) bool
    boxes_local: np.ndarray  # (200, 7) proposal boxes in the reference frame
    scores: np.ndarray       # (200,)
    length: int              # true track length (<= pad length)

    @property
    def pad_length(self) -> int:
        return self.rows.shape[0]


def extract_object_points(track, frames, alpha: float = ROI_SCALE_DEFAULT) -> ObjectSample:
    """Crop each frame's points inside the alpha-scaled tracked box.

    Scaling multiplies the dimensions only; center and yaw are unchanged.
    The box boundary is closed, so alpha=1 keeps exact surface points.
    """
    per_frame = []
    for e in track.entries:
        frame = frames[e.frame_index]
        if frame.frame_index != e.frame_index:
            raise ValueError("frames list must be indexed by frame_index")
        if frame.num_points == 0:
            per_frame.append(np.empty((0, 5)))
            continue
        world = transform_points(frame.points, frame.pose)
        inside = points_in_box(e.box, world[:, :3], scale=alpha)
        per_frame.append(world[inside])
    return ObjectSample(
        track_id=track.track_id,
        class_id=track.class_id,
        frame_indices=[e.frame_index for e in track.entries],
        boxes=[e.box for e in track.entries],
        scores=[e.score for e in track.entries],
        per_frame_points=per_frame,
    )


def p2s_encode(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Signed distances from points to the six box faces (box frame):
    (x-l/2, -x-l/2, y-w/2, -y-w/2, z-h/2, -z-h/2); negative inside."""
    local = to_box_local(box, np.asarray(points)[..., :3])
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    hl, hw, hh = box.l / 2.0, box.w / 2.0, box.h / 2.0
    return np.stack([x - hl, -x - hl, y - hw, -y - hw, z - hh, -z - hh], axis=-1)


def p2co_encode(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Offsets from points to the box center and its eight canonical
    corners, as box-frame quantities: 3 + 24 = 27 values per point."""
    local = to_box_local(box, np.asarray(points)[..., :3])
    corners = local_corners(box)
    offsets = local[..., None, :] - corners  # (..., 8, 3)
    return np.concatenate([local, offsets.reshape(*local.shape[:-1], 24)], axis=-1)


def _resample(rows: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, len(rows), size=count)
    return rows[idx]


def _geometry_features(points: np.ndarray, box: Box3D) -> np.ndarray:
    """(x, y, z, intensity) in box frame plus the 6 surface distances."""
    local = to_box_local(box, points[:, :3])
    return np.concatenate([local, points[:, 3:4], p2s_encode(points[:, :3], box)],
                          axis=-1)


def build_geometry_set(sample: ObjectSample, t: int = GEOMETRY_QUERY_COUNT,
                       seed: int = 0, mode: str = TRAINING) -> GeometryPointSet:
    """Pool all frames' box-local points into one cloud and draw the value
    rows and t query frames.

    Training picks query frames uniformly (with replacement, so short tracks
    still yield t queries); inference picks the t highest-score non-empty
    frames, cycling when fewer exist.
    """
    non_empty = sample.non_empty()
    if not non_empty:
        raise EmptySampleError(f"track {sample.track_id} has no object points")
    rng = np.random.default_rng([seed, sample.track_id, 0])

    per_frame_feats = {
        i: _geometry_features(sample.per_frame_points[i], sample.boxes[i])
        for i in non_empty}
    pooled = np.vstack([per_frame_feats[i] for i in non_empty])
    value_rows = _resample(pooled, GEOMETRY_VALUE_POINTS, rng)

    if mode == TRAINING:
        chosen = [int(i) for i in rng.choice(non_empty, size=t, replace=True)]
    else:
        ranked = sorted(non_empty, key=lambda i: (-sample.scores[i], i))
        chosen = [ranked[k % len(ranked)] for k in range(t)]

    query_rows = np.empty((t, QUERY_POINTS, 11))
    query_sizes = np.empty((t, 3))
    for qi, fi in enumerate(chosen):
        feats = _resample(per_frame_feats[fi], QUERY_POINTS, rng)
        score_col = np.full((QUERY_POINTS, 1), sample.scores[fi])
        query_rows[qi] = np.concatenate([feats, score_col], axis=-1)
        query_sizes[qi] = sample.boxes[fi].size
    return GeometryPointSet(query_rows, value_rows, query_sizes, chosen)


def build_position_set(sample: ObjectSample, seed: int = 0,
                       mode: str = TRAINING):
    """Express the whole track in one reference box's local frame.

    Returns (PositionPointSet, reference_index). The reference entry is the
    middle one at inference and a seeded random one during training. Frames
    without points and pad frames get all-zero rows with valid_mask False.
    """
    non_empty = sample.non_empty()
    if not non_empty:
        raise EmptySampleError(f"track {sample.track_id} has no object points")
    if sample.length > TRACK_PAD_LENGTH:
        raise ValueError(f"track length {sample.length} exceeds pad length "
                         f"{TRACK_PAD_LENGTH}")
    rng = np.random.default_rng([seed, sample.track_id, 1])
    if mode == TRAINING:
        reference_index = int(rng.integers(sample.length))
    else:
        reference_index = sample.length // 2
    ref_box = sample.boxes[reference_index]

    rows = np.zeros((TRACK_PAD_LENGTH, QUERY_POINTS, 32))
    valid = np.zeros(TRACK_PAD_LENGTH, dtype=bool)
    boxes_local = np.zeros((TRACK_PAD_LENGTH, 7))
    scores = np.zeros(TRACK_PAD_LENGTH)
    for i in range(sample.length):
        local_box = _box_in_reference(sample.boxes[i], ref_box)
        boxes_local[i] = local_box.to_array()
        scores[i] = sample.scores[i]
        pts = sample.per_frame_points[i]
        if not len(pts):
            continue
        picked = _resample(pts, QUERY_POINTS, rng)
        local_pts = to_box_local(ref_box, picked[:, :3])
        offsets = p2co_encode(local_pts, local_box)
        score_col = np.full((QUERY_POINTS, 1), sample.scores[i])
        rows[i] = np.concatenate(
            [local_pts, picked[:, 3:4], offsets, score_col], axis=-1)
        valid[i] = True
    return PositionPointSet(rows, valid, boxes_local, scores,
                            sample.length), reference_index


def _box_in_reference(box: Box3D, ref: Box3D) -> Box3D:
    center = to_box_local(ref, box.center.reshape(1, 3))[0]
    return Box3D(center[0], center[1], center[2],
                 box.l, box.w, box.h, box.yaw - ref.yaw)


def position_value_rows(pset: PositionPointSet, seed: int = 0) -> np.ndarray:
    """Pool the valid frames' rows and resample the cross-attention value
    set (n_pos rows of 32 features); deterministic per seed."""
    valid_rows = pset.rows[pset.valid_mask].reshape(-1, pset.rows.shape[-1])
    if not len(valid_rows):
        raise EmptySampleError("position set has no valid rows")
    rng = np.random.default_rng([seed, 2])
    return _resample(valid_rows, POSITION_VALUE_POINTS, rng)
