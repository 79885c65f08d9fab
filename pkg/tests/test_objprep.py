import math

import numpy as np
import pytest

from offtrack.config import ObjectClass
from offtrack.geom import Box3D, PointCloudFrame, Pose, corners, transform_box
from offtrack.objprep import (EmptySampleError, INFERENCE, ObjectSample,
                              TRAINING, build_geometry_set,
                              build_position_set, extract_object_points,
                              p2co_encode, p2s_encode, position_value_rows)
from offtrack.tracker import Track, TrackEntry

UNIT_CUBE = Box3D(0, 0, 0, 1, 1, 1, 0)


def _frame(i, world_points):
    pts = np.asarray(world_points, dtype=np.float64)
    if pts.size and pts.shape[1] == 3:
        pts = np.hstack([pts, np.full((len(pts), 2), 0.5)])
    return PointCloudFrame(i, i * 100000, pts.reshape(-1, 5), Pose.identity())


def _sample(boxes, per_frame_points, scores=None, track_id=0):
    n = len(boxes)
    scores = scores or [0.9] * n
    return ObjectSample(track_id, ObjectClass.VEHICLE, list(range(n)), boxes,
                        scores, [np.asarray(p, dtype=np.float64).reshape(-1, 5)
                                 for p in per_frame_points])


# --- extraction ---------------------------------------------------------------

def test_extract_boundary_and_scaling():
    box = Box3D(0, 0, 0, 2, 2, 2, 0)
    pts = [[1.0, 1.0, 1.0],      # exact corner: inside at alpha=1 (closed)
           [1.05, 0.0, 0.0],     # 1.05 x half-extent: only inside at alpha=1.1
           [100.0, 0.0, 0.0]]    # far away: never inside
    frames = [_frame(0, pts)]
    track = Track(0, ObjectClass.VEHICLE, [TrackEntry(0, box, 0.9, True)], 0)

    tight = extract_object_points(track, frames, alpha=1.0)
    assert len(tight.per_frame_points[0]) == 1
    np.testing.assert_allclose(tight.per_frame_points[0][0, :3], [1, 1, 1])

    scaled = extract_object_points(track, frames, alpha=1.1)
    got = scaled.per_frame_points[0][:, 0]
    assert len(got) == 2 and 1.05 in got


# --- p2s ----------------------------------------------------------------------

def test_p2s_center_of_unit_cube():
    d = p2s_encode(np.array([[0.0, 0.0, 0.0]]), UNIT_CUBE)
    np.testing.assert_allclose(d, -0.5)


def test_p2s_on_face_and_outside():
    on_face = p2s_encode(np.array([[0.5, 0.0, 0.0]]), UNIT_CUBE)[0]
    assert on_face[0] == pytest.approx(0.0, abs=1e-12)
    outside = p2s_encode(np.array([[1.0, 0.0, 0.0]]), UNIT_CUBE)[0]
    np.testing.assert_allclose(outside, [0.5, -1.5, -0.5, -0.5, -0.5, -0.5])


def test_p2s_sign_pattern():
    rng = np.random.default_rng(0)
    box = Box3D(1, -2, 0.5, 4, 2, 1.5, 0.7)
    half = box.size / 2
    for _ in range(50):
        inside_local = rng.uniform(-0.99, 0.99, 3) * half
        from offtrack.geom import from_box_local
        p = from_box_local(box, inside_local.reshape(1, 3))
        assert (p2s_encode(p, box) < 0).all()
        outside_local = rng.uniform(1.01, 3.0, 3) * half * rng.choice([-1, 1], 3)
        p = from_box_local(box, outside_local.reshape(1, 3))
        assert (p2s_encode(p, box) > 0).any()


# --- p2co ---------------------------------------------------------------------

def test_p2co_center_and_corner():
    at_center = p2co_encode(np.array([[0.0, 0.0, 0.0]]), UNIT_CUBE)[0]
    np.testing.assert_allclose(at_center[:3], 0.0)
    from offtrack.geom import local_corners
    np.testing.assert_allclose(at_center[3:].reshape(8, 3), -local_corners(UNIT_CUBE))
    first_corner = corners(UNIT_CUBE)[0]
    at_corner = p2co_encode(first_corner.reshape(1, 3), UNIT_CUBE)[0]
    np.testing.assert_allclose(at_corner[3:6], 0.0, atol=1e-12)


def test_p2co_elementwise_oracle():
    rng = np.random.default_rng(1)
    box = Box3D(2, 1, -0.5, 3, 1.5, 1.2, -0.9)
    pts = rng.normal(size=(20, 3)) * 3
    got = p2co_encode(pts, box)
    from offtrack.geom import local_corners, to_box_local
    local = to_box_local(box, pts)
    np.testing.assert_allclose(got[:, :3], local, atol=1e-12)
    for k, corner in enumerate(local_corners(box)):
        np.testing.assert_allclose(got[:, 3 + 3 * k:6 + 3 * k], local - corner,
                                   atol=1e-12)


def test_encodings_rigid_equivariance():
    rng = np.random.default_rng(2)
    box = Box3D(1, 2, 0, 4, 2, 1.6, 0.4)
    pts = rng.normal(size=(10, 3)) * 2 + box.center
    pose = Pose.from_yaw_translation(1.3, [7.0, -2.0, 3.0])
    moved_box = transform_box(box, pose)
    moved_pts = pts @ pose.rotation.T + pose.translation
    np.testing.assert_allclose(p2s_encode(moved_pts, moved_box),
                               p2s_encode(pts, box), atol=1e-9)
    np.testing.assert_allclose(p2co_encode(moved_pts, moved_box),
                               p2co_encode(pts, box), atol=1e-9)


# --- geometry set ---------------------------------------------------------------

def test_geometry_set_resamples_multiset():
    rng = np.random.default_rng(3)
    pts = np.hstack([rng.normal(size=(10, 3)) * 0.3, np.full((10, 2), 0.5)])
    sample = _sample([UNIT_CUBE], [pts])
    gset = build_geometry_set(sample, t=2, seed=7)
    assert gset.value_rows.shape == (4096, 10)
    assert gset.query_rows.shape == (2, 256, 11)
    # every value row must be one of the 10 source points (box-local == world here)
    source = np.round(pts[:, :3], 9)
    for row in gset.value_rows[:100]:
        assert any(np.allclose(row[:3], s) for s in source)


def test_geometry_set_seed_reproducible():
    rng = np.random.default_rng(4)
    frames_pts = [np.hstack([rng.normal(size=(30, 3)), np.full((30, 2), 0.5)])
                  for _ in range(5)]
    sample = _sample([UNIT_CUBE] * 5, frames_pts)
    a = build_geometry_set(sample, t=3, seed=11)
    b = build_geometry_set(sample, t=3, seed=11)
    assert a.query_frames == b.query_frames
    np.testing.assert_array_equal(a.value_rows, b.value_rows)
    np.testing.assert_array_equal(a.query_rows, b.query_rows)
    c = build_geometry_set(sample, t=3, seed=12)
    assert (a.query_frames != c.query_frames
            or not np.array_equal(a.value_rows, c.value_rows))


def test_geometry_set_pools_disjoint_halves():
    # A static cube seen from +x in frame 0 and -x in frame 1; the pooled
    # cloud must cover both halves even though each frame covers one.
    plus = np.hstack([np.full((40, 1), 0.5),
                      np.random.default_rng(5).uniform(-0.5, 0.5, (40, 2)),
                      np.full((40, 2), 0.5)])
    minus = plus.copy()
    minus[:, 0] = -0.5
    sample = _sample([UNIT_CUBE, UNIT_CUBE], [plus, minus])
    gset = build_geometry_set(sample, t=2, seed=0)
    xs = gset.value_rows[:, 0]
    assert (xs > 0.4).sum() > 500 and (xs < -0.4).sum() > 500


def test_geometry_set_inference_picks_highest_scores():
    rng = np.random.default_rng(6)
    frames_pts = [np.hstack([rng.normal(size=(5, 3)), np.full((5, 2), 0.5)])
                  for _ in range(4)]
    sample = _sample([UNIT_CUBE] * 4, frames_pts, scores=[0.2, 0.9, 0.4, 0.8])
    gset = build_geometry_set(sample, t=3, seed=0, mode=INFERENCE)
    assert gset.query_frames == [1, 3, 2]
    np.testing.assert_allclose(gset.query_rows[0, :, 10], 0.9)


def test_geometry_set_empty_sample_error():
    sample = _sample([UNIT_CUBE], [np.empty((0, 5))])
    with pytest.raises(EmptySampleError):
        build_geometry_set(sample, t=1, seed=0)


# --- position set ----------------------------------------------------------------

def test_position_set_reference_identity():
    rng = np.random.default_rng(8)
    pts = np.hstack([rng.normal(size=(20, 3)) * 0.3, np.full((20, 2), 0.5)])
    box = Box3D(3, -1, 0.5, 2, 1, 1, 0.8)
    world = pts.copy()
    world[:, :3] = world[:, :3] * 0.2 + box.center
    sample = _sample([box], [world])
    pset, ref = build_position_set(sample, seed=0, mode=INFERENCE)
    assert ref == 0
    np.testing.assert_allclose(pset.boxes_local[0], [0, 0, 0, 2, 1, 1, 0],
                               atol=1e-12)


def test_position_set_valid_mask_count():
    rng = np.random.default_rng(9)
    frames_pts = [np.hstack([rng.normal(size=(8, 3)), np.full((8, 2), 0.5)])
                  for _ in range(3)]
    sample = _sample([UNIT_CUBE] * 3, frames_pts)
    pset, _ = build_position_set(sample, seed=0)
    assert pset.valid_mask.sum() == 3
    assert pset.rows.shape == (200, 256, 32)
    assert np.all(pset.rows[3:] == 0.0)


def test_position_set_empty_frame_masked():
    rng = np.random.default_rng(10)
    pts = np.hstack([rng.normal(size=(8, 3)), np.full((8, 2), 0.5)])
    sample = _sample([UNIT_CUBE] * 3, [pts, np.empty((0, 5)), pts])
    pset, _ = build_position_set(sample, seed=0)
    assert list(pset.valid_mask[:3]) == [True, False, True]
    assert np.all(pset.rows[1] == 0.0)


def test_position_set_linear_track_collinear_centers():
    rng = np.random.default_rng(11)
    boxes = [Box3D(2.0 * i, 1.0 * i, 0.0, 4, 2, 1.6, 0.3) for i in range(9)]
    frames_pts = [np.hstack([rng.normal(size=(6, 3)) + b.center, np.full((6, 2), 0.5)])
                  for b in boxes]
    sample = _sample(boxes, frames_pts)
    pset, ref = build_position_set(sample, seed=0, mode=INFERENCE)
    assert ref == 4
    centers = pset.boxes_local[:9, :2]
    d = centers[1:] - centers[0]
    cross = d[1:, 0] * d[0, 1] - d[1:, 1] * d[0, 0]
    assert np.abs(cross).max() < 1e-9


def test_position_value_rows_deterministic():
    rng = np.random.default_rng(12)
    frames_pts = [np.hstack([rng.normal(size=(50, 3)), np.full((50, 2), 0.5)])
                  for _ in range(4)]
    sample = _sample([UNIT_CUBE] * 4, frames_pts)
    pset, _ = build_position_set(sample, seed=3)
    a = position_value_rows(pset, seed=5)
    b = position_value_rows(pset, seed=5)
    assert a.shape == (2048, 32)
    np.testing.assert_array_equal(a, b)
