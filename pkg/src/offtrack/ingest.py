"""Sequence data model, on-disk formats, detection filtering and grouping.

A sequence directory contains:

- ``frames.jsonl``: one object per frame,
  ``{"frame_index": i, "timestamp_us": t, "pose": [12 floats]}`` with the
  pose row-major ``r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2``
  (sensor-to-world).
- ``points/<frame_index>.f32le``: raw little-endian float32, N x 5 rows of
  ``(x, y, z, intensity, elongation)`` in sensor coordinates; N inferred
  from the file size, which must divide by 20 bytes.
- ``detections.jsonl``: ``{"frame_index": i, "class": "vehicle",
  "box": [cx, cy, cz, l, w, h, yaw], "score": s}`` in world coordinates.
- ``gt_tracks.jsonl`` (optional): ``{"track_id": str, "class": str,
  "entries": [{"frame_index": i, "box": [7 floats]}]}``.

Saving a loaded bundle reproduces the files byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from offtrack.config import ClassThresholds, ObjectClass
from offtrack.geom import (Box3D, PointCloudFrame, Pose, bev_intersection_area,
                           points_in_box, transform_points)
from offtrack.tracker import Track, TrackEntry


class IngestError(Exception):
    """Base for sequence-loading failures."""


class ParseError(IngestError):
    """A line of a .jsonl file failed to parse or had wrong fields."""


class StructureError(IngestError):
    """Files parsed but the sequence structure is inconsistent."""


@dataclass(frozen=True)
class Detection:
    """One detector box in world coordinates."""

    box: Box3D
    score: float
    class_id: ObjectClass
    frame_index: int
    point_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")
        if self.point_count < 0:
            raise ValueError("point_count must be >= 0")


@dataclass
class SequenceBundle:
    """One sequence: frames with points and poses, per-frame detections, and
    optional ground-truth tracks."""

    sequence_id: str
    frames: list
    detections: list  # detections[i] lists Detection objects of frame i
    gt_tracks: list = field(default_factory=list)

    def __post_init__(self):
        indices = [f.frame_index for f in self.frames]
        if indices != list(range(len(self.frames))):
            raise StructureError(
                f"{self.sequence_id}: frame indices must be contiguous from 0, got {indices[:8]}...")
        if len(self.detections) != len(self.frames):
            raise StructureError(
                f"{self.sequence_id}: detections list must align with frames")
        for per_frame, frame in zip(self.detections, self.frames):
            for d in per_frame:
                if d.frame_index != frame.frame_index:
                    raise StructureError(
                        f"{self.sequence_id}: detection filed under frame "
                        f"{frame.frame_index} claims frame {d.frame_index}")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def all_detections(self) -> list:
        return [d for per_frame in self.detections for d in per_frame]


# ---------------------------------------------------------------------------
# Loading / saving


def _read_jsonl(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def _require(obj, key, path, lineno):
    if key not in obj:
        raise ParseError(f"{path}:{lineno}: missing field {key!r}")
    return obj[key]


def count_points_in_box(frame: PointCloudFrame, box: Box3D) -> int:
    """Points of the frame (world coordinates) inside the box."""
    if frame.num_points == 0:
        return 0
    world = transform_points(frame.points[:, :3], frame.pose)
    return int(points_in_box(box, world).sum())


def load_sequence(directory) -> SequenceBundle:
    """Load and validate a sequence directory.

    Detection point counts are recomputed from the point clouds, so stored
    counts can never drift from the data.
    """
    d = Path(directory)
    frames_path = d / "frames.jsonl"
    if not frames_path.exists():
        raise IngestError(f"{d}: missing frames.jsonl")

    frames = []
    for lineno, obj in _read_jsonl(frames_path):
        idx = _require(obj, "frame_index", frames_path, lineno)
        ts = _require(obj, "timestamp_us", frames_path, lineno)
        pose_vals = _require(obj, "pose", frames_path, lineno)
        if len(pose_vals) != 12:
            raise ParseError(f"{frames_path}:{lineno}: pose must have 12 floats")
        pts_path = d / "points" / f"{idx}.f32le"
        if not pts_path.exists():
            raise IngestError(f"{d}: missing point file for frame {idx} ({pts_path.name})")
        raw = pts_path.read_bytes()
        if len(raw) % 20 != 0:
            raise IngestError(
                f"{pts_path}: size {len(raw)} is not a multiple of 20 bytes (5 float32)")
        pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 5).astype(np.float64)
        frames.append(PointCloudFrame(int(idx), int(ts), pts, Pose.from_flat(pose_vals)))

    frames.sort(key=lambda f: f.frame_index)
    by_index = {f.frame_index: f for f in frames}
    world_cache = {}

    detections = [[] for _ in frames]
    det_path = d / "detections.jsonl"
    if det_path.exists():
        for lineno, obj in _read_jsonl(det_path):
            idx = _require(obj, "frame_index", det_path, lineno)
            if idx not in by_index:
                raise StructureError(
                    f"{det_path}:{lineno}: detection references unknown frame {idx}")
            cls = ObjectClass.from_label(_require(obj, "class", det_path, lineno))
            box = Box3D.from_array(_require(obj, "box", det_path, lineno))
            score = float(_require(obj, "score", det_path, lineno))
            frame = by_index[idx]
            if idx not in world_cache:
                world_cache[idx] = transform_points(frame.points[:, :3], frame.pose) \
                    if frame.num_points else np.empty((0, 3))
            n_inside = int(points_in_box(box, world_cache[idx]).sum())
            detections[idx].append(Detection(box, score, cls, int(idx), n_inside))

    gt_tracks = []
    gt_path = d / "gt_tracks.jsonl"
    if gt_path.exists():
        for tid, (lineno, obj) in enumerate(_read_jsonl(gt_path)):
            cls = ObjectClass.from_label(_require(obj, "class", gt_path, lineno))
            entries = []
            for e in _require(obj, "entries", gt_path, lineno):
                fi = int(e["frame_index"])
                if fi not in by_index:
                    raise StructureError(
                        f"{gt_path}:{lineno}: gt entry references unknown frame {fi}")
                entries.append(TrackEntry(fi, Box3D.from_array(e["box"]), 1.0, True))
            entries.sort(key=lambda e: e.frame_index)
            gt_tracks.append(Track(tid, cls, entries,
                                   birth_frame=entries[0].frame_index,
                                   name=str(_require(obj, "track_id", gt_path, lineno))))

    return SequenceBundle(d.name, frames, detections, gt_tracks)


def _dump_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":")) + "\n"


def save_sequence(bundle: SequenceBundle, directory) -> None:
    """Write a bundle in the sequence directory format (see module docs)."""
    d = Path(directory)
    (d / "points").mkdir(parents=True, exist_ok=True)
    with open(d / "frames.jsonl", "w", encoding="utf-8") as fh:
        for f in bundle.frames:
            fh.write(_dump_line({"frame_index": f.frame_index,
                                 "timestamp_us": f.timestamp_us,
                                 "pose": f.pose.to_flat()}))
            (d / "points" / f"{f.frame_index}.f32le").write_bytes(
                np.ascontiguousarray(f.points, dtype="<f4").tobytes())
    with open(d / "detections.jsonl", "w", encoding="utf-8") as fh:
        for per_frame in bundle.detections:
            for det in per_frame:
                fh.write(_dump_line({"frame_index": det.frame_index,
                                     "class": det.class_id.label,
                                     "box": [float(v) for v in det.box.to_array()],
                                     "score": det.score}))
    if bundle.gt_tracks:
        save_gt_tracks(bundle.gt_tracks, d / "gt_tracks.jsonl")


def save_gt_tracks(tracks, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tracks:
            fh.write(_dump_line({
                "track_id": t.name or str(t.track_id),
                "class": t.class_id.label,
                "entries": [{"frame_index": e.frame_index,
                             "box": [float(v) for v in e.box.to_array()]}
                            for e in t.entries],
            }))


def save_tracks(tracks, path) -> None:
    """Serialize tracker output; adds per-entry score and updated flag."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in tracks:
            fh.write(_dump_line({
                "track_id": t.track_id,
                "class": t.class_id.label,
                "entries": [{"frame_index": e.frame_index,
                             "box": [float(v) for v in e.box.to_array()],
                             "score": e.score,
                             "updated": e.updated}
                            for e in t.entries],
            }))


def load_tracks(path) -> list:
    tracks = []
    for lineno, obj in _read_jsonl(Path(path)):
        entries = [TrackEntry(int(e["frame_index"]), Box3D.from_array(e["box"]),
                              float(e["score"]), bool(e["updated"]))
                   for e in obj["entries"]]
        tracks.append(Track(int(obj["track_id"]),
                            ObjectClass.from_label(obj["class"]),
                            entries,
                            birth_frame=entries[0].frame_index))
    return tracks


# ---------------------------------------------------------------------------
# Detection pre-filtering


def overlap_filter(detections, thr: ClassThresholds):
    """Greedy overlap-ratio suppression, per frame.

    Boxes are visited in descending score; a box is removed when its BEV
    footprint is covered by an already-kept box beyond its class threshold.
    Suppression is cross-class (a pedestrian box wholly inside a kept vehicle
    box is removed) but the threshold is the suppressed box's. Ties break by
    score desc, class asc, insertion order.
    """
    out = []
    for per_frame in detections:
        order = sorted(range(len(per_frame)),
                       key=lambda i: (-per_frame[i].score, per_frame[i].class_id, i))
        kept_idx = []
        for i in order:
            cand = per_frame[i]
            limit = thr.overlap_filter[cand.class_id]
            area = cand.box.bev_area()
            suppressed = any(
                bev_intersection_area(per_frame[k].box, cand.box) / area > limit
                for k in kept_idx)
            if not suppressed:
                kept_idx.append(i)
        keep = set(kept_idx)
        out.append([d for i, d in enumerate(per_frame) if i in keep])
    return out


def split_score_groups(detections, thr: ClassThresholds):
    """Partition per-frame detections into (high, low) score groups.

    High requires score above the class minimum AND strictly more points
    inside the box than the class minimum; everything else is low.
    """
    high = [[] for _ in detections]
    low = [[] for _ in detections]
    for i, per_frame in enumerate(detections):
        for d in per_frame:
            if (d.score > thr.high_min_score[d.class_id]
                    and d.point_count > thr.high_min_points[d.class_id]):
                high[i].append(d)
            else:
                low[i].append(d)
    return high, low
