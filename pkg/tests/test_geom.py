import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offtrack.geom import (Box3D, Pose, angle_diff, corners, from_box_local,
                           iou_3d, iou_bev, normalize_angle, overlap_ratio,
                           points_in_box, to_box_local, transform_box,
                           transform_points)

from mc_oracles import mc_iou_3d, mc_iou_bev, mc_overlap_ratio, random_box_pairs

UNIT_CUBE = Box3D(0, 0, 0, 1, 1, 1, 0.0)


def test_box_validation():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, -1, 1, 1, 0)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 1, 0, 1, 0)
    with pytest.raises(ValueError):
        Box3D(float("nan"), 0, 0, 1, 1, 1, 0)


def test_yaw_normalized_on_construction():
    assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(math.pi)
    assert Box3D(0, 0, 0, 1, 1, 1, -math.pi).yaw == pytest.approx(math.pi)
    assert Box3D(0, 0, 0, 1, 1, 1, 2 * math.pi).yaw == pytest.approx(0.0)


@given(st.floats(-100, 100))
def test_normalize_angle_range(theta):
    v = normalize_angle(theta)
    assert -math.pi < v <= math.pi
    assert math.isclose(math.cos(v), math.cos(theta), abs_tol=1e-9)
    assert math.isclose(math.sin(v), math.sin(theta), abs_tol=1e-9)


# --- corners ---------------------------------------------------------------

def test_corners_unit_cube():
    got = corners(UNIT_CUBE)
    expected = 0.5 * np.array([
        [+1, +1, -1], [-1, +1, -1], [-1, -1, -1], [+1, -1, -1],
        [+1, +1, +1], [-1, +1, +1], [-1, -1, +1], [+1, -1, +1],
    ])
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_corners_half_turn_same_set():
    got = corners(Box3D(0, 0, 0, 1, 1, 1, math.pi))
    np.testing.assert_allclose(got[0], [-0.5, -0.5, -0.5], atol=1e-12)
    base = corners(UNIT_CUBE)
    got_sorted = np.array(sorted(map(tuple, np.round(got, 9))))
    base_sorted = np.array(sorted(map(tuple, np.round(base, 9))))
    np.testing.assert_allclose(got_sorted, base_sorted, atol=1e-9)


def test_corners_rotated_box_hand_case():
    # (+2, +1) rotated 90 deg ccw -> (-1, +2); plus center (1, 2).
    box = Box3D(1, 2, 0, 4, 2, 1, math.pi / 2)
    np.testing.assert_allclose(corners(box)[0], [0.0, 4.0, -0.5], atol=1e-12)


# --- IoU / overlap ----------------------------------------------------------

def test_iou_bev_identical():
    assert iou_bev(UNIT_CUBE, UNIT_CUBE) == pytest.approx(1.0)


def test_iou_bev_disjoint():
    far = Box3D(100, 0, 0, 1, 1, 1, 0.3)
    assert iou_bev(UNIT_CUBE, far) == 0.0


def test_iou_bev_half_shifted():
    b = Box3D(0.5, 0, 0, 1, 1, 1, 0)
    assert iou_bev(UNIT_CUBE, b) == pytest.approx(0.5 / 1.5, abs=1e-12)


def test_iou_3d_identical_and_z_shift():
    assert iou_3d(UNIT_CUBE, UNIT_CUBE) == pytest.approx(1.0)
    b = Box3D(0, 0, 0.5, 1, 1, 1, 0)
    assert iou_3d(UNIT_CUBE, b) == pytest.approx(0.5 / 1.5, abs=1e-12)


def test_overlap_ratio_containment():
    vehicle = Box3D(0, 0, 0, 5, 2.2, 1.8, 0.4)
    ped = Box3D(0.3, 0.1, 0, 0.8, 0.8, 1.7, -0.2)
    assert overlap_ratio(vehicle, ped) == pytest.approx(1.0)
    assert iou_bev(vehicle, ped) < 0.2


def test_overlap_ratio_disjoint_and_half():
    far = Box3D(50, 0, 0, 1, 1, 1, 0)
    assert overlap_ratio(UNIT_CUBE, far) == 0.0
    big = Box3D(5.0, 0, 0, 10, 10, 10, 0)  # covers the x >= 0 half
    assert overlap_ratio(big, UNIT_CUBE) == pytest.approx(0.5, abs=1e-12)


def test_iou_symmetry_and_range():
    for a, b in random_box_pairs(50, seed=7):
        ab, ba = iou_bev(a, b), iou_bev(b, a)
        assert ab == pytest.approx(ba, abs=1e-9)
        assert 0.0 <= ab <= 1.0
        ab3, ba3 = iou_3d(a, b), iou_3d(b, a)
        assert ab3 == pytest.approx(ba3, abs=1e-9)
        assert 0.0 <= ab3 <= 1.0


def test_iou_one_for_pi_flip_equal_footprint():
    a = Box3D(1, 2, 3, 4, 2, 1.5, 0.7)
    flipped = Box3D(1, 2, 3, 4, 2, 1.5, 0.7 + math.pi)
    swapped = Box3D(1, 2, 3, 2, 4, 1.5, 0.7 + math.pi / 2)
    assert iou_bev(a, flipped) == pytest.approx(1.0, abs=1e-9)
    assert iou_bev(a, swapped) == pytest.approx(1.0, abs=1e-9)
    assert iou_3d(a, flipped) == pytest.approx(1.0, abs=1e-9)


def test_overlap_ratio_one_whenever_contained():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = Box3D(*rng.uniform(-1, 1, 3), 6, 5, 4, rng.uniform(-np.pi, np.pi))
        # Small object near the subject center is necessarily contained.
        o = Box3D(s.cx + rng.uniform(-0.4, 0.4), s.cy + rng.uniform(-0.4, 0.4),
                  s.cz, 0.5, 0.5, 0.5, rng.uniform(-np.pi, np.pi))
        assert overlap_ratio(s, o) == pytest.approx(1.0, abs=1e-9)


def test_geometry_rigid_invariance():
    pose = Pose.from_yaw_translation(1.1, [5.0, -3.0, 2.0])
    for a, b in random_box_pairs(25, seed=11):
        ta, tb = transform_box(a, pose), transform_box(b, pose)
        assert iou_bev(ta, tb) == pytest.approx(iou_bev(a, b), abs=1e-6)
        assert iou_3d(ta, tb) == pytest.approx(iou_3d(a, b), abs=1e-6)
        assert overlap_ratio(ta, tb) == pytest.approx(overlap_ratio(a, b), abs=1e-6)


def test_iou_matches_monte_carlo_sample():
    # Smaller-scale version of the acceptance criterion, for fast feedback.
    for i, (a, b) in enumerate(random_box_pairs(30, seed=23)):
        assert iou_bev(a, b) == pytest.approx(mc_iou_bev(a, b, 400_000, seed=i), abs=5e-3)
        assert iou_3d(a, b) == pytest.approx(mc_iou_3d(a, b, 400_000, seed=i), abs=5e-3)
        assert overlap_ratio(a, b) == pytest.approx(
            mc_overlap_ratio(a, b, 400_000, seed=i), abs=5e-3)


# --- transforms --------------------------------------------------------------

def test_transform_box_identity_and_translation():
    box = Box3D(1, 2, 3, 4, 2, 1, 0.5)
    same = transform_box(box, Pose.identity())
    assert same.to_array() == pytest.approx(box.to_array())
    moved = transform_box(box, Pose.from_yaw_translation(0.0, [10, 0, 0]))
    assert (moved.cx, moved.cy, moved.yaw) == pytest.approx((11, 2, 0.5))


def test_transform_box_z_rotation():
    box = Box3D(1, 0, 0, 2, 1, 1, 0.0)
    rot = Pose.from_yaw_translation(math.pi / 2, [0, 0, 0])
    out = transform_box(box, rot)
    assert (out.cx, out.cy, out.cz) == pytest.approx((0, 1, 0), abs=1e-12)
    assert out.yaw == pytest.approx(math.pi / 2)


def test_transform_box_rejects_tilted_pose():
    c, s = math.cos(0.01), math.sin(0.01)
    tilt = Pose(np.array([[1, 0, 0], [0, c, -s], [0, s, c]]), np.zeros(3))
    with pytest.raises(ValueError):
        transform_box(Box3D(0, 0, 0, 1, 1, 1, 0), tilt)


def test_to_box_local_hand_cases():
    box = Box3D(1, 2, 3, 2, 2, 2, 0.3)
    np.testing.assert_allclose(to_box_local(box, box.center), 0.0, atol=1e-12)
    rot = Box3D(0, 0, 0, 2, 2, 2, math.pi / 2)
    np.testing.assert_allclose(to_box_local(rot, np.array([0.0, 1.0, 0.0])),
                               [1.0, 0.0, 0.0], atol=1e-12)


def test_box_local_round_trip():
    rng = np.random.default_rng(0)
    box = Box3D(3.2, -1.5, 0.7, 4, 2, 1.6, 2.1)
    pts = rng.normal(size=(1000, 3)) * 10
    back = from_box_local(box, to_box_local(box, pts))
    assert np.abs(back - pts).max() < 1e-9


def test_transform_points_preserves_features():
    pose = Pose.from_yaw_translation(0.7, [1, 2, 3])
    pts = np.array([[1.0, 0.0, 0.0, 0.5, 0.25]])
    out = transform_points(pts, pose)
    assert out.shape == (1, 5)
    np.testing.assert_allclose(out[0, 3:], [0.5, 0.25])
    inv = transform_points(out, pose.inverse())
    np.testing.assert_allclose(inv, pts, atol=1e-12)


def test_points_in_box_boundary_closed():
    on_face = np.array([[0.5, 0.0, 0.0]])
    assert points_in_box(UNIT_CUBE, on_face).all()
    outside = np.array([[0.5 + 1e-9, 0.0, 0.0]])
    assert not points_in_box(UNIT_CUBE, outside).any()


# --- angles -----------------------------------------------------------------

@pytest.mark.parametrize("a,b,expected", [
    (0.0, 0.0, 0.0),
    (0.0, 2 * math.pi, 0.0),
    (-3.0, 3.0, 2 * math.pi - 6.0),
])
def test_angle_diff_cases(a, b, expected):
    assert angle_diff(a, b) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_angle_diff_bounds_and_symmetry(a, b):
    d = angle_diff(a, b)
    assert 0.0 <= d <= math.pi + 1e-12
    assert d == pytest.approx(angle_diff(b, a), abs=1e-12)
