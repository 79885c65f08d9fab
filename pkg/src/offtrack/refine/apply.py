"""Track-level refinement: apply GRM size, PRM position/heading, and CRM
score to one track, mapping position outputs back from the reference frame
to world coordinates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from offtrack.geom import Box3D, normalize_angle
from offtrack.objprep import (EmptySampleError, INFERENCE, ObjectSample,
                              build_geometry_set, build_position_set,
                              position_value_rows)
from offtrack.refine.labels import ScorePair, fuse_score
from offtrack.tracker import Track, TrackEntry

LOGGER = logging.getLogger("offtrack.refine")

SCORE_NORM = math.sqrt(2.0)


@dataclass
class RefinerSet:
    """The three per-class models plus shared inference settings."""

    grm: object
    prm: object
    crm: object
    query_count: int = 3
    seed: int = 0


def refine_track(track: Track, sample: ObjectSample, models: RefinerSet) -> Track:
    """Refined copy of the track.

    Geometry size overwrites every entry; position offsets and heading are
    applied per valid frame in the reference frame and mapped back to world;
    the fused confidence score replaces the score on all entries. Raises
    EmptySampleError when the track has no points at all (caller demotes the
    track to passthrough).
    """
    gset = build_geometry_set(sample, t=models.query_count, seed=models.seed,
                              mode=INFERENCE)
    size = models.grm.predict_size(gset)

    pset, ref_index = build_position_set(sample, seed=models.seed, mode=INFERENCE)
    values = position_value_rows(pset, seed=models.seed)
    centers_local, yaws_local, valid = models.prm.predict(pset, values)
    ref_box = sample.boxes[ref_index]

    pair = models.crm.predict(gset.query_rows)
    score = fuse_score(pair)

    cos_r, sin_r = math.cos(ref_box.yaw), math.sin(ref_box.yaw)
    entries = []
    for i, e in enumerate(track.entries):
        if valid[i]:
            lx, ly, lz = centers_local[i]
            wx = cos_r * lx - sin_r * ly + ref_box.cx
            wy = sin_r * lx + cos_r * ly + ref_box.cy
            wz = lz + ref_box.cz
            yaw = normalize_angle(yaws_local[i] + ref_box.yaw)
        else:
            wx, wy, wz, yaw = e.box.cx, e.box.cy, e.box.cz, e.box.yaw
        box = Box3D(wx, wy, wz, size[0], size[1], size[2], yaw)
        entries.append(TrackEntry(e.frame_index, box, score, e.updated))
    return replace(track, entries=entries)


def refine_or_passthrough(track: Track, sample: ObjectSample,
                          models: "RefinerSet | None") -> Track:
    """refine_track with demotion: any refusal logs and returns the track
    unchanged (it is then emitted like a short track)."""
    if models is None:
        return track
    try:
        return refine_track(track, sample, models)
    except EmptySampleError as exc:
        LOGGER.warning("track %d passed through unrefined: %s", track.track_id, exc)
        return track


def export_score(score: float, normalize: bool = True) -> float:
    """Label-file score: fused scores live in [0, sqrt(2)]; exports divide
    by sqrt(2) and clamp so files stay in [0, 1] (flag-controlled)."""
    if normalize:
        return min(1.0, max(0.0, score / SCORE_NORM))
    return score
