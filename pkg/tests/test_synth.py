import math

import numpy as np
import pytest

from offtrack.config import ObjectClass
from offtrack.geom import to_box_local, transform_points
from offtrack.ingest import save_sequence
from offtrack.synth import (ObjectSpec, ScenarioConfig, ScenarioError,
                            corrupt, generate, scenario_from_toml)

CUBE = ObjectSpec(ObjectClass.VEHICLE, (2.0, 2.0, 2.0), (10.0, 0.0, 0.0))


def _single(spec, **kw):
    return ScenarioConfig(objects=(spec,), **kw)


def test_static_points_on_faces_pre_noise():
    cfg = _single(CUBE, frame_count=5, seed=1)
    bundle = generate(cfg)
    box = bundle.gt_tracks[0].entries[0].box
    for f in bundle.frames:
        assert f.num_points > 0
        world = transform_points(f.points[:, :3], f.pose)
        local = to_box_local(box, world)
        half = box.size / 2.0
        slack = np.abs(local) - half
        assert np.all(slack <= 1e-9), "point outside its source box"
        assert np.all(slack.max(axis=1) > -1e-9), "point not on any face"


def test_density_falloff_quarter_at_double_range():
    near = _single(ObjectSpec(ObjectClass.VEHICLE, (2, 2, 2), (10.0, 0, 0)),
                   frame_count=100, seed=7, sensor_start=(0, 0, 0))
    far = _single(ObjectSpec(ObjectClass.VEHICLE, (2, 2, 2), (20.0, 0, 0)),
                  frame_count=100, seed=7, sensor_start=(0, 0, 0))
    n_near = np.mean([f.num_points for f in generate(near).frames])
    n_far = np.mean([f.num_points for f in generate(far).frames])
    # Density law is 1/r^2 at the face, so the exact ratio is (9.5/19.5)^2.
    assert n_far / n_near == pytest.approx(0.25, rel=0.10)


def test_arc_motion_centers_on_circle():
    spec = ObjectSpec(ObjectClass.VEHICLE, (4, 2, 1.6), (15.0, 5.0, 0.8),
                      yaw=0.4, motion="arc", speed=3.0, arc_rate=0.2)
    cfg = _single(spec, frame_count=50, seed=0)
    bundle = generate(cfg)
    r = spec.arc_radius
    center = np.array([15.0 - r * math.sin(0.4), 5.0 + r * math.cos(0.4)])
    for e in bundle.gt_tracks[0].entries:
        d = math.hypot(e.box.cx - center[0], e.box.cy - center[1])
        assert d == pytest.approx(r, abs=1e-9)


def test_generate_deterministic_on_disk(tmp_path):
    cfg = _single(CUBE, frame_count=4, point_noise_sigma=0.02,
                  det_center_sigma=0.1, fp_per_frame=0.5, fn_rate=0.1, seed=42)
    for sub in ("x", "y"):
        save_sequence(corrupt(generate(cfg), cfg), tmp_path / sub)
    for rel in ["frames.jsonl", "detections.jsonl", "gt_tracks.jsonl",
                "points/0.f32le", "points/3.f32le"]:
        assert (tmp_path / "x" / rel).read_bytes() == (tmp_path / "y" / rel).read_bytes()


def test_gt_tracks_complete():
    cfg = ScenarioConfig(objects=(
        CUBE,
        ObjectSpec(ObjectClass.PEDESTRIAN, (0.9, 0.9, 1.7), (5.0, 6.0, 0.85),
                   motion="line", speed=1.2, yaw=2.0),
    ), frame_count=30, seed=2)
    bundle = generate(cfg)
    assert len(bundle.gt_tracks) == 2
    for t in bundle.gt_tracks:
        assert [e.frame_index for e in t.entries] == list(range(30))


def test_corrupt_no_noise_reproduces_gt():
    cfg = _single(CUBE, frame_count=6, seed=5)
    bundle = corrupt(generate(cfg), cfg)
    for t in bundle.gt_tracks:
        for e in t.entries:
            dets = bundle.detections[e.frame_index]
            assert len(dets) == 1
            np.testing.assert_array_equal(dets[0].box.to_array(), e.box.to_array())
            assert dets[0].point_count > 0


def test_corrupt_fn_one_drops_everything():
    cfg = _single(CUBE, frame_count=6, fn_rate=1.0, seed=5)
    bundle = corrupt(generate(cfg), cfg)
    assert bundle.all_detections() == []


def test_corrupt_fn_rate_concentration():
    objects = tuple(
        ObjectSpec(ObjectClass.VEHICLE, (3, 2, 1.6), (10.0 + 8 * i, -30.0 + 7 * i, 0.8))
        for i in range(10))
    cfg = ScenarioConfig(objects=objects, frame_count=200, fn_rate=0.2, seed=11,
                         points_per_m2_at_10m=20.0)
    bundle = corrupt(generate(cfg), cfg)
    total = 10 * 200
    kept = len(bundle.all_detections())
    dropped = (total - kept) / total
    assert 0.17 <= dropped <= 0.23


def test_overlapping_objects_rejected():
    with pytest.raises(ScenarioError, match="overlap"):
        ScenarioConfig(objects=(
            CUBE,
            ObjectSpec(ObjectClass.VEHICLE, (2, 2, 2), (10.5, 0.0, 0.0)),
        ), seed=0)


def test_fp_rate_produces_low_score_boxes():
    cfg = _single(CUBE, frame_count=50, fp_per_frame=2.0, seed=13)
    bundle = corrupt(generate(cfg), cfg)
    n_fp = len(bundle.all_detections()) - 50  # one true det per frame
    assert 60 <= n_fp <= 140  # Poisson(2) over 50 frames
    fp_scores = [d.score for per in bundle.detections for d in per if d.score <= 0.3]
    assert len(fp_scores) >= 60


def test_scenario_toml_round_trip(tmp_path):
    text = """
[scenario]
frame_count = 12
seed = 9
fn_rate = 0.05
fp_per_frame = 0.5
sensor_start = [0.0, 0.0, 1.5]

[[object]]
class = "vehicle"
size = [4.5, 2.0, 1.7]
start = [12.0, 3.0, 0.85]
yaw = 0.2
motion = "line"
speed = 2.5

[[object]]
class = "cyclist"
size = [1.8, 0.8, 1.7]
start = [-8.0, 5.0, 0.85]
motion = "arc"
speed = 2.0
arc_rate = 0.15
"""
    p = tmp_path / "scenario.toml"
    p.write_text(text)
    cfg = scenario_from_toml(p)
    assert cfg.frame_count == 12 and cfg.seed == 9
    assert cfg.sensor_start == (0.0, 0.0, 1.5)
    assert len(cfg.objects) == 2
    assert cfg.objects[0].class_id == ObjectClass.VEHICLE
    assert cfg.objects[1].motion == "arc"
    bundle = corrupt(generate(cfg), cfg)
    assert bundle.num_frames == 12


def test_occlusion_flag_removes_shadowed_points():
    blocker = ObjectSpec(ObjectClass.VEHICLE, (3.0, 3.0, 3.0), (8.0, 0.0, 0.0))
    hidden = ObjectSpec(ObjectClass.VEHICLE, (2.0, 2.0, 2.0), (16.0, 0.0, 0.0))
    base = ScenarioConfig(objects=(blocker, hidden), frame_count=3, seed=4,
                          sensor_start=(0, 0, 0))
    occluded = ScenarioConfig(objects=(blocker, hidden), frame_count=3, seed=4,
                              sensor_start=(0, 0, 0), occlusion=True)
    n_base = sum(f.num_points for f in generate(base).frames)
    n_occ = sum(f.num_points for f in generate(occluded).frames)
    assert n_occ < n_base
