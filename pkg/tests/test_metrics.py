import math

import numpy as np
import pytest

from offtrack.config import ObjectClass
from offtrack.geom import Box3D
from offtrack.metrics import (EvalReport, ap_aph, evaluate, frame_pr,
                              match_frame, mota, pr_curve, recall_at_track)
from offtrack.tracker import Track, TrackEntry

V = ObjectClass.VEHICLE


def _box(x, y=0.0, yaw=0.0):
    return Box3D(x, y, 0.0, 2.0, 2.0, 2.0, yaw)


def _track(tid, items, cls=V):
    entries = [TrackEntry(f, box, score, True) for f, box, score in items]
    return Track(tid, cls, entries, entries[0].frame_index)


def _gt_track(tid, frames, x=0.0, cls=V):
    return _track(tid, [(f, _box(x), 1.0) for f in frames], cls)


# --- match_frame ----------------------------------------------------------------

def test_match_frame_perfect():
    gts = [_box(0), _box(10)]
    preds = [(_box(0), 0.9), (_box(10), 0.8)]
    tps, fps, fns = match_frame(preds, gts, 0.7)
    assert len(tps) == 2 and not fps and not fns


def test_match_frame_no_predictions():
    tps, fps, fns = match_frame([], [_box(0), _box(5)], 0.7)
    assert not tps and not fps and fns == [0, 1]


def test_match_frame_two_preds_one_gt():
    gts = [_box(0)]
    preds = [(_box(0.05), 0.6), (_box(0.0), 0.9)]
    tps, fps, fns = match_frame(preds, gts, 0.5)
    # higher-score pred wins the gt; exhaustive over both orders
    assert tps[0][0] == 1 and fps == [0] and not fns


# --- AP / APH ---------------------------------------------------------------------

def test_ap_perfect_detections():
    gt = [_gt_track(0, range(10))]
    pred = [_track(1, [(f, _box(0), 0.9) for f in range(10)])]
    ap, aph = ap_aph(pred, gt, 0.7)
    assert ap == pytest.approx(1.0)
    assert aph == pytest.approx(1.0)


def test_aph_zero_when_yaw_opposite():
    gt = [_gt_track(0, range(5))]
    pred = [_track(1, [(f, _box(0, yaw=math.pi), 0.9) for f in range(5)])]
    ap, aph = ap_aph(pred, gt, 0.5)
    assert ap == pytest.approx(1.0)
    assert aph == pytest.approx(0.0, abs=1e-12)


def test_ap_hand_computed_staircase():
    # 5 gt boxes; predictions ranked by score: TP, FP, TP, TP, FP.
    # PR points: (0.2,1), (0.2,1/2), (0.4,2/3), (0.6,3/4), (0.6,3/5).
    # Precision envelope: 1.0 on (0,0.2], then 3/4 on (0.2,0.6].
    gt = [_gt_track(0, range(5))]
    items = [
        (0, _box(0.0), 0.95),    # TP
        (1, _box(50.0), 0.9),    # FP
        (2, _box(0.0), 0.85),    # TP
        (3, _box(0.0), 0.8),     # TP
        (4, _box(50.0), 0.75),   # FP
    ]
    pred = [_track(1, items)]
    ap, _ = ap_aph(pred, gt, 0.5)
    # envelope: r in (0,0.2] -> max prec at recall>=r = 1.0;
    # (0.2,0.4] -> 2/3; (0.4,0.6] -> 3/4
    want = 0.2 * 1.0 + 0.2 * 0.75 + 0.2 * 0.75
    assert ap == pytest.approx(want, abs=1e-12)


def test_ap_none_without_gt():
    pred = [_track(1, [(0, _box(0), 0.9)])]
    assert ap_aph(pred, [], 0.7) == (None, None)


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(3)
    gt = [_gt_track(0, range(20))]
    items = [(f, _box(rng.uniform(0, 0.7)), float(rng.uniform(0.2, 1)))
             for f in range(20)]
    pred = [_track(1, items)]
    values = [ap_aph(pred, gt, thr)[0] for thr in (0.3, 0.5, 0.7)]
    assert values[0] >= values[1] >= values[2]


def test_aph_never_exceeds_ap():
    rng = np.random.default_rng(4)
    gt = [_gt_track(0, range(15))]
    items = [(f, _box(rng.uniform(0, 0.5), yaw=rng.uniform(-3, 3)),
              float(rng.uniform(0.2, 1))) for f in range(15)]
    pred = [_track(1, items)]
    ap, aph = ap_aph(pred, gt, 0.5)
    assert aph <= ap + 1e-12


# --- MOTA -------------------------------------------------------------------------

def test_mota_perfect():
    gt = [_gt_track(0, range(10)), _gt_track(1, range(10), x=20.0)]
    preds = [_track(10, [(f, _box(0), 0.9) for f in range(10)]),
             _track(11, [(f, _box(20.0), 0.9) for f in range(10)])]
    value, motp, idsw, counts = mota(preds, gt, 0.7)
    assert value == pytest.approx(1.0)
    assert idsw == 0
    assert motp == pytest.approx(0.0, abs=1e-9)
    assert counts["gt_count"] == 20


def test_mota_single_id_switch_closed_form():
    gt = [_gt_track(0, range(100))]
    first = _track(5, [(f, _box(0), 0.9) for f in range(50)])
    second = _track(6, [(f, _box(0), 0.9) for f in range(50, 100)])
    value, _, idsw, _ = mota([first, second], gt, 0.7)
    assert idsw == 1
    assert value == pytest.approx(1.0 - 1.0 / 100)


def test_mota_empty_predictions():
    gt = [_gt_track(0, range(10))]
    value, motp, idsw, counts = mota([], gt, 0.7)
    assert value == pytest.approx(0.0)
    assert counts["fn"] == 10


def test_mota_continuity_preference():
    # Two co-located identical preds; gt matched pred 7 in frame 0 must keep
    # it in frame 1 even though pred 8 ties on IoU.
    gt = [_gt_track(0, range(2))]
    p7 = _track(7, [(0, _box(0), 0.9), (1, _box(0), 0.9)])
    p8 = _track(8, [(1, _box(0), 0.9)])
    _, _, idsw, _ = mota([p7, p8], gt, 0.5)
    assert idsw == 0


# --- Recall@track -----------------------------------------------------------------

def test_recall_at_track_perfect():
    gt = [_gt_track(0, range(10))]
    pred = [_track(3, [(f, _box(0), 0.9) for f in range(10)])]
    assert recall_at_track(pred, gt, 0.7) == 1.0


def test_recall_at_track_split_gets_no_credit():
    gt = [_gt_track(0, range(10))]
    a = _track(3, [(f, _box(0), 0.9) for f in range(5)])
    b = _track(4, [(f, _box(0), 0.9) for f in range(5, 10)])
    assert recall_at_track([a, b], gt, 0.7) == 0.0


def test_recall_at_track_boundary_80_percent():
    gt = [_gt_track(0, range(10))]
    pred = [_track(3, [(f, _box(0), 0.9) for f in range(8)])]
    assert recall_at_track(pred, gt, 0.7) == 1.0
    shorter = [_track(3, [(f, _box(0), 0.9) for f in range(7)])]
    assert recall_at_track(shorter, gt, 0.7) == 0.0


# --- report ------------------------------------------------------------------------

def test_evaluate_report_round_trip():
    gt = [_gt_track(0, range(10)),
          _gt_track(1, range(10), x=15.0, cls=ObjectClass.PEDESTRIAN)]
    pred = [_track(5, [(f, _box(0), 0.9) for f in range(10)]),
            _track(6, [(f, _box(15.0), 0.8) for f in range(10)],
                   cls=ObjectClass.PEDESTRIAN)]
    report = evaluate(pred, gt)
    assert set(report.per_class) == {"vehicle", "pedestrian"}
    assert report.per_class["vehicle"].mota == pytest.approx(1.0)
    text = report.to_json()
    again = EvalReport.from_json(text)
    assert again.to_json() == text


def test_report_omits_absent_classes():
    gt = [_gt_track(0, range(5))]
    pred = [_track(5, [(f, _box(0), 0.9) for f in range(5)])]
    report = evaluate(pred, gt)
    assert set(report.per_class) == {"vehicle"}


def test_frame_pr_counts():
    gt = [_gt_track(0, range(4))]
    items = [(0, _box(0), 0.9), (1, _box(0), 0.9), (2, _box(50), 0.9)]
    pred = [_track(1, items)]
    p, r, tp, fp, fn = frame_pr(pred, gt, 0.5)
    assert (tp, fp, fn) == (2, 1, 2)
    assert p == pytest.approx(2 / 3)
    assert r == pytest.approx(0.5)


def test_pr_curve_shapes():
    gt = [_gt_track(0, range(5))]
    pred = [_track(1, [(f, _box(0), 0.5 + 0.1 * f) for f in range(5)])]
    recall, precision = pr_curve(pred, gt, 0.5)
    assert len(recall) == len(precision) == 5
    assert recall[-1] == pytest.approx(1.0)
