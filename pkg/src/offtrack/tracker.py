"""Offline multi-object tracker.

Tracking-by-detection with an immortal life cycle: tracks are never
terminated mid-sequence. Each frame runs a two-stage association (high-score
detections first, leftover tracks then claim low-score ones), matched boxes
replace track state outright (no Kalman smoothing), unmatched tracks coast on
a constant-velocity placeholder, and overlapping tracks are merged into the
earlier-born ID. A reverse-order pass over the same sequence is fused with
the forward pass via weighted box fusion to fill dropouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from offtrack.config import ClassThresholds, ObjectClass
from offtrack.geom import (Box3D, angle_diff, iou_bev_matrix, normalize_angle,
                           overlap_ratio)

FORWARD = "forward"
REVERSE = "reverse"


@dataclass(frozen=True)
class TrackEntry:
    frame_index: int
    box: Box3D
    score: float
    updated: bool


@dataclass
class Track:
    """Time-indexed box sequence for one object identity.

    Entries are kept in insertion order (ascending frame for forward passes,
    descending for reverse passes until re-sorted); placeholder entries
    (updated=False) exist only for association and are stripped before the
    track is emitted.
    """

    track_id: int
    class_id: ObjectClass
    entries: list
    birth_frame: int
    name: str = ""

    def updated_entries(self) -> list:
        return [e for e in self.entries if e.updated]

    def last_updated(self) -> TrackEntry:
        for e in reversed(self.entries):
            if e.updated:
                return e
        raise ValueError(f"track {self.track_id} has no updated entries")

    def frame_map(self) -> dict:
        return {e.frame_index: e for e in self.entries}

    def sorted_by_frame(self) -> "Track":
        return replace(self, entries=sorted(self.entries, key=lambda e: e.frame_index))

    def validate(self):
        frames = [e.frame_index for e in self.entries]
        if len(set(frames)) != len(frames):
            raise ValueError(f"track {self.track_id}: duplicate frame entries")


@dataclass
class TrackerState:
    tracks: list = field(default_factory=list)
    next_id: int = 0
    direction: str = FORWARD


def predict(track: Track, frame_index: int) -> Box3D:
    """Constant-velocity center extrapolation from the last two updated
    entries; size and yaw are held at the last updated values."""
    ups = track.updated_entries()
    last = ups[-1]
    if len(ups) == 1 or last.frame_index == frame_index:
        return last.box
    prev = ups[-2]
    dt = last.frame_index - prev.frame_index
    vel = (last.box.center - prev.box.center) / dt
    center = last.box.center + vel * (frame_index - last.frame_index)
    return Box3D(center[0], center[1], center[2],
                 last.box.l, last.box.w, last.box.h, last.box.yaw)


def associate(tracks, dets, iou_threshold: float):
    """Optimal assignment between tracks and same-frame detections.

    Cost is 1 - BEV IoU between each track's predicted box and the detection
    box; pairs at or below the IoU threshold are discarded after solving.

    Returns (matches, unmatched_track_indices, unmatched_det_indices) with
    matches as (track_index, det_index) pairs.
    """
    if not tracks or not dets:
        return [], list(range(len(tracks))), list(range(len(dets)))
    frame = dets[0].frame_index
    pred = [predict(t, frame) for t in tracks]
    iou = iou_bev_matrix(pred, [d.box for d in dets])
    rows, cols = linear_sum_assignment(1.0 - iou)
    matches = []
    matched_t, matched_d = set(), set()
    for r, c in zip(rows, cols):
        if iou[r, c] > iou_threshold:
            matches.append((int(r), int(c)))
            matched_t.add(int(r))
            matched_d.add(int(c))
    unmatched_t = [i for i in range(len(tracks)) if i not in matched_t]
    unmatched_d = [i for i in range(len(dets)) if i not in matched_d]
    return matches, unmatched_t, unmatched_d


def step(state: TrackerState, frame_index: int, high, low,
         thr: ClassThresholds) -> TrackerState:
    """Advance all tracks by one frame against the (high, low) score groups.

    Stage 1 associates every track with the high-score group; matched boxes
    replace track state. Stage 2 lets still-unmatched tracks claim low-score
    detections. Unmatched high detections spawn new tracks (birth rate 1),
    unmatched low detections are dropped, and every still-unmatched track
    receives a constant-velocity placeholder entry and persists.
    """
    for cls in ObjectClass:
        tracks = [t for t in state.tracks if t.class_id == cls]
        dets_hi = [d for d in high if d.class_id == cls]
        dets_lo = [d for d in low if d.class_id == cls]

        matches, un_t, un_d = associate(tracks, dets_hi, thr.assoc_stage1_iou[cls])
        for ti, di in matches:
            d = dets_hi[di]
            tracks[ti].entries.append(TrackEntry(frame_index, d.box, d.score, True))

        stage2_tracks = [tracks[i] for i in un_t]
        matches2, un_t2, _ = associate(stage2_tracks, dets_lo, thr.assoc_stage2_iou[cls])
        for ti, di in matches2:
            d = dets_lo[di]
            stage2_tracks[ti].entries.append(TrackEntry(frame_index, d.box, d.score, True))

        for di in un_d:
            d = dets_hi[di]
            state.tracks.append(Track(state.next_id, cls,
                                      [TrackEntry(frame_index, d.box, d.score, True)],
                                      birth_frame=frame_index))
            state.next_id += 1

        for i in un_t2:
            t = stage2_tracks[i]
            t.entries.append(TrackEntry(frame_index, predict(t, frame_index),
                                        t.last_updated().score, False))
    return state


def _merge_pair(keep: Track, other: Track) -> Track:
    merged = dict(keep.frame_map())
    for frame, entry in other.frame_map().items():
        cur = merged.get(frame)
        if cur is None:
            merged[frame] = entry
        elif (entry.updated, entry.score) > (cur.updated, cur.score):
            merged[frame] = entry
    keep.entries = [merged[f] for f in sorted(merged)]
    keep.birth_frame = min(keep.birth_frame, other.birth_frame)
    return keep


def merge_overlapping_tracks(state: TrackerState, thr: ClassThresholds) -> TrackerState:
    """Merge same-class track pairs whose latest updated boxes overlap (in
    either direction) beyond the merge threshold, keeping the earlier-birth
    ID; on conflicting frames the updated, higher-score entry wins."""
    changed = True
    while changed:
        changed = False
        tracks = sorted(state.tracks, key=lambda t: (t.birth_frame, t.track_id))
        for i in range(len(tracks)):
            for j in range(i + 1, len(tracks)):
                a, b = tracks[i], tracks[j]
                if a.class_id != b.class_id:
                    continue
                box_a = a.last_updated().box
                box_b = b.last_updated().box
                t = thr.merge_overlap[a.class_id]
                if overlap_ratio(box_a, box_b) > t or overlap_ratio(box_b, box_a) > t:
                    _merge_pair(a, b)
                    state.tracks.remove(b)
                    changed = True
                    break
            if changed:
                break
    return state


def run(bundle, thr: ClassThresholds, direction: str = FORWARD):
    """Track one sequence in the given time order and emit finished tracks.

    The reverse pass only flips frame iteration order; boxes stay in world
    coordinates and output entries are re-sorted to ascending frame index.
    Placeholder entries are stripped after the final frame.
    """
    from offtrack import ingest  # deferred: ingest imports Track from here

    if direction not in (FORWARD, REVERSE):
        raise ValueError(f"direction must be {FORWARD!r} or {REVERSE!r}")
    filtered = ingest.overlap_filter(bundle.detections, thr)
    high, low = ingest.split_score_groups(filtered, thr)

    state = TrackerState(direction=direction)
    order = range(len(bundle.frames))
    if direction == REVERSE:
        order = reversed(order)
    for frame_index in order:
        step(state, frame_index, high[frame_index], low[frame_index], thr)
        merge_overlapping_tracks(state, thr)

    out = []
    for t in sorted(state.tracks, key=lambda t: t.track_id):
        kept = t.updated_entries()
        if not kept:
            continue
        out.append(Track(t.track_id, t.class_id,
                         sorted(kept, key=lambda e: e.frame_index),
                         birth_frame=min(e.frame_index for e in kept)))
    return out


def wbf_pair(b1: Box3D, s1: float, b2: Box3D, s2: float):
    """Weighted box fusion of two boxes: score-weighted center/size mean and
    circular yaw mean (after pi-flipping b2 when headings oppose), with the
    fused score the arithmetic mean."""
    total = s1 + s2
    if total <= 0.0:
        raise ValueError("wbf_pair requires s1 + s2 > 0")
    yaw2 = b2.yaw
    if angle_diff(b1.yaw, yaw2) > math.pi / 2:
        yaw2 = normalize_angle(yaw2 + math.pi)
    center = (s1 * b1.center + s2 * b2.center) / total
    size = (s1 * b1.size + s2 * b2.size) / total
    yaw = math.atan2(s1 * math.sin(b1.yaw) + s2 * math.sin(yaw2),
                     s1 * math.cos(b1.yaw) + s2 * math.cos(yaw2))
    box = Box3D(center[0], center[1], center[2], size[0], size[1], size[2], yaw)
    return box, (s1 + s2) / 2.0


def _track_similarity(a: Track, b: Track) -> float:
    """Mean BEV IoU over temporally co-present frames; 0 without overlap."""
    fa, fb = a.frame_map(), b.frame_map()
    common = sorted(set(fa) & set(fb))
    if not common:
        return 0.0
    ious = iou_bev_matrix([fa[f].box for f in common], [fb[f].box for f in common])
    return float(np.mean(np.diag(ious)))


FUSION_SIMILARITY_THRESHOLD = 0.5


def fuse_forward_reverse(fwd, rev):
    """Fuse forward- and reverse-pass tracks of one sequence.

    Per class, tracks are matched by Hungarian assignment on mean co-present
    BEV IoU (threshold 0.5). Matched pairs fuse frame-wise: co-present frames
    via wbf_pair, frames seen by only one pass copied verbatim, which fills
    dropouts that only one direction recovered. Unmatched tracks pass
    through; reverse-only tracks are re-numbered above all forward IDs.
    """
    fused = []
    leftover_rev = []
    for cls in ObjectClass:
        f_cls = [t for t in fwd if t.class_id == cls]
        r_cls = [t for t in rev if t.class_id == cls]
        matched_f, matched_r = set(), set()
        if f_cls and r_cls:
            sim = np.array([[_track_similarity(a, b) for b in r_cls] for a in f_cls])
            rows, cols = linear_sum_assignment(-sim)
            for r, c in zip(rows, cols):
                if sim[r, c] <= FUSION_SIMILARITY_THRESHOLD:
                    continue
                fused.append(_fuse_tracks(f_cls[r], r_cls[c]))
                matched_f.add(r)
                matched_r.add(c)
        fused.extend(t for i, t in enumerate(f_cls) if i not in matched_f)
        leftover_rev.extend(t for i, t in enumerate(r_cls) if i not in matched_r)

    next_id = max((t.track_id for t in fwd), default=-1) + 1
    for t in sorted(leftover_rev, key=lambda t: t.track_id):
        fused.append(replace(t, track_id=next_id))
        next_id += 1
    return sorted(fused, key=lambda t: t.track_id)


def _fuse_tracks(f: Track, r: Track) -> Track:
    fa, fb = f.frame_map(), r.frame_map()
    entries = []
    for frame in sorted(set(fa) | set(fb)):
        if frame in fa and frame in fb:
            ef, er = fa[frame], fb[frame]
            box, score = wbf_pair(ef.box, ef.score, er.box, er.score)
            entries.append(TrackEntry(frame, box, score, True))
        else:
            entries.append(fa.get(frame) or fb[frame])
    return Track(f.track_id, f.class_id, entries,
                 birth_frame=entries[0].frame_index)


def route_tracks(tracks, thr: ClassThresholds):
    """Split tracks into (refinable, passthrough) by updated-entry count."""
    refinable, passthrough = [], []
    for t in tracks:
        if len(t.updated_entries()) < thr.min_refine_length[t.class_id]:
            passthrough.append(t)
        else:
            refinable.append(t)
    return refinable, passthrough
