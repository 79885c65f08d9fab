"""Evaluation: AP / heading-weighted AP, CLEAR-MOT (MOTA/MOTP/ID switches),
track-level recall, and frame-level precision/recall tables.

AP uses all-point interpolation (area under the precision envelope). APH is
AP with every true positive's contribution, in both precision and recall,
weighted by heading accuracy max(0, 1 - |yaw error| / pi), so AP >= APH
always. MOTP is reported as mean (1 - IoU) over matches (lower is better).
A ground-truth track counts for Recall@track only when at least 80% of its
boxes are matched by ONE predicted track id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from offtrack.config import ObjectClass
from offtrack.geom import angle_diff, iou_3d

DEFAULT_MATCH_IOU = {ObjectClass.VEHICLE: 0.7,
                     ObjectClass.PEDESTRIAN: 0.5,
                     ObjectClass.CYCLIST: 0.5}
PR_TABLE_IOUS = {ObjectClass.VEHICLE: (0.5, 0.7),
                 ObjectClass.PEDESTRIAN: (0.3, 0.5),
                 ObjectClass.CYCLIST: (0.3, 0.5)}
TRACK_COMPLETENESS = 0.8


@dataclass
class ClassMetrics:
    ap: "float | None" = None
    aph: "float | None" = None
    mota: float = 0.0
    motp: float = 0.0
    id_switches: int = 0
    recall_at_track: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    gt_count: int = 0
    pr_table: dict = field(default_factory=dict)  # iou_thr -> (precision, recall)


@dataclass
class EvalReport:
    per_class: dict = field(default_factory=dict)  # class label -> ClassMetrics

    def to_json(self) -> str:
        out = {}
        for label, m in sorted(self.per_class.items()):
            out[label] = {
                "ap": m.ap, "aph": m.aph, "mota": m.mota, "motp": m.motp,
                "id_switches": m.id_switches,
                "recall_at_track": m.recall_at_track,
                "tp": m.tp, "fp": m.fp, "fn": m.fn, "gt_count": m.gt_count,
                "pr_table": {f"{thr:g}": [p, r]
                             for thr, (p, r) in sorted(m.pr_table.items())},
            }
        return json.dumps(out, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        raw = json.loads(text)
        report = EvalReport()
        for label, m in raw.items():
            report.per_class[label] = ClassMetrics(
                ap=m["ap"], aph=m["aph"], mota=m["mota"], motp=m["motp"],
                id_switches=m["id_switches"],
                recall_at_track=m["recall_at_track"],
                tp=m["tp"], fp=m["fp"], fn=m["fn"], gt_count=m["gt_count"],
                pr_table={float(k): tuple(v) for k, v in m["pr_table"].items()})
        return report


def _entries_by_frame(tracks):
    by_frame = {}
    for t in tracks:
        for e in t.entries:
            if e.updated:
                by_frame.setdefault(e.frame_index, []).append((t.track_id, e))
    return by_frame


def match_frame(preds, gts, iou_thr: float):
    """Greedy same-frame matching in descending prediction score.

    `preds` is a list of (box, score), `gts` a list of boxes. Each gt
    matches at most once; a match needs 3D IoU above the threshold. Returns
    (tp_pairs, fp_indices, fn_indices); tp pairs are (pred_idx, gt_idx, iou).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    taken = [False] * len(gts)
    tps, fps = [], []
    for i in order:
        box = preds[i][0]
        best_j, best_iou = -1, iou_thr
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = iou_3d(box, gt)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
            tps.append((i, best_j, best_iou))
        else:
            fps.append(i)
    fns = [j for j, t in enumerate(taken) if not t]
    return tps, fps, fns


def _scored_matches(pred_tracks, gt_tracks, iou_thr):
    """Global (score, tp, heading_weight) list plus the gt box count."""
    preds_by_frame = _entries_by_frame(pred_tracks)
    gts_by_frame = _entries_by_frame(gt_tracks)
    records = []
    n_gt = sum(len(v) for v in gts_by_frame.values())
    for frame in sorted(set(preds_by_frame) | set(gts_by_frame)):
        preds = [(e.box, e.score) for _, e in preds_by_frame.get(frame, [])]
        gts = [e.box for _, e in gts_by_frame.get(frame, [])]
        tps, fps, _ = match_frame(preds, gts, iou_thr)
        for i, j, _iou in tps:
            weight = max(0.0, 1.0 - angle_diff(preds[i][0].yaw, gts[j].yaw) / math.pi)
            records.append((preds[i][1], 1.0, weight))
        for i in fps:
            records.append((preds[i][1], 0.0, 0.0))
    records.sort(key=lambda r: -r[0])
    return records, n_gt


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[1.0], precision])
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * envelope[1:]))


def ap_aph(pred_tracks, gt_tracks, iou_thr: float):
    """(AP, APH) over the sequence, or (None, None) without ground truth."""
    records, n_gt = _scored_matches(pred_tracks, gt_tracks, iou_thr)
    if n_gt == 0:
        return None, None
    if not records:
        return 0.0, 0.0
    tp = np.array([r[1] for r in records])
    hw = np.array([r[2] for r in records])
    ranks = np.arange(1, len(records) + 1)
    ap = _interpolated_ap(np.cumsum(tp) / n_gt, np.cumsum(tp) / ranks)
    aph = _interpolated_ap(np.cumsum(tp * hw) / n_gt, np.cumsum(tp * hw) / ranks)
    return ap, aph


def frame_pr(pred_tracks, gt_tracks, iou_thr: float):
    """(precision, recall, tp, fp, fn) pooled over all frames."""
    preds_by_frame = _entries_by_frame(pred_tracks)
    gts_by_frame = _entries_by_frame(gt_tracks)
    tp = fp = fn = 0
    for frame in sorted(set(preds_by_frame) | set(gts_by_frame)):
        preds = [(e.box, e.score) for _, e in preds_by_frame.get(frame, [])]
        gts = [e.box for _, e in gts_by_frame.get(frame, [])]
        tps, fps, fns = match_frame(preds, gts, iou_thr)
        tp += len(tps)
        fp += len(fps)
        fn += len(fns)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, tp, fp, fn


def mota(pred_tracks, gt_tracks, iou_thr: float):
    """CLEAR-MOT: (MOTA, MOTP, id_switches, counts dict).

    Per-frame optimal matching at the IoU threshold; a gt keeps its previous
    frame's partner whenever that pairing still clears the threshold (match
    continuity). MOTP is mean (1 - IoU) over matches.
    """
    preds_by_frame = _entries_by_frame(pred_tracks)
    gts_by_frame = _entries_by_frame(gt_tracks)
    last_partner = {}
    tp = fp = fn = idsw = 0
    distance_sum = 0.0
    n_gt = sum(len(v) for v in gts_by_frame.values())
    for frame in sorted(set(preds_by_frame) | set(gts_by_frame)):
        preds = preds_by_frame.get(frame, [])
        gts = gts_by_frame.get(frame, [])
        matches = {}
        used_preds = set()
        # continuity pass
        pred_by_id = {pid: e for pid, e in preds}
        for gid, ge in gts:
            prev = last_partner.get(gid)
            if prev is not None and prev in pred_by_id:
                iou = iou_3d(ge.box, pred_by_id[prev].box)
                if iou > iou_thr:
                    matches[gid] = (prev, iou)
                    used_preds.add(prev)
        # optimal pass for the rest
        rest_gts = [(gid, ge) for gid, ge in gts if gid not in matches]
        rest_preds = [(pid, pe) for pid, pe in preds if pid not in used_preds]
        if rest_gts and rest_preds:
            cost = np.ones((len(rest_gts), len(rest_preds)))
            for a, (_, ge) in enumerate(rest_gts):
                for b, (_, pe) in enumerate(rest_preds):
                    cost[a, b] = 1.0 - iou_3d(ge.box, pe.box)
            rows, cols = linear_sum_assignment(cost)
            for a, b in zip(rows, cols):
                iou = 1.0 - cost[a, b]
                if iou > iou_thr:
                    gid = rest_gts[a][0]
                    pid = rest_preds[b][0]
                    matches[gid] = (pid, iou)
                    used_preds.add(pid)
        for gid, (pid, iou) in matches.items():
            prev = last_partner.get(gid)
            if prev is not None and prev != pid:
                idsw += 1
            last_partner[gid] = pid
            tp += 1
            distance_sum += 1.0 - iou
        fn += len(gts) - len(matches)
        fp += len(preds) - len(used_preds)
    mota_value = 1.0 - (fn + fp + idsw) / n_gt if n_gt else 0.0
    motp_value = distance_sum / tp if tp else 0.0
    return mota_value, motp_value, idsw, {"tp": tp, "fp": fp, "fn": fn,
                                          "gt_count": n_gt}


def recall_at_track(pred_tracks, gt_tracks, iou_thr: float,
                    completeness: float = TRACK_COMPLETENESS) -> float:
    """Fraction of gt tracks with >= completeness of their boxes matched by
    a single predicted track id."""
    if not gt_tracks:
        return 0.0
    hits = 0
    for gt in gt_tracks:
        gt_boxes = {e.frame_index: e.box for e in gt.entries if e.updated}
        best = 0
        for pred in pred_tracks:
            count = 0
            for e in pred.entries:
                if not e.updated:
                    continue
                gt_box = gt_boxes.get(e.frame_index)
                if gt_box is not None and iou_3d(e.box, gt_box) > iou_thr:
                    count += 1
            best = max(best, count)
        if best >= completeness * len(gt_boxes) - 1e-9:
            hits += 1
    return hits / len(gt_tracks)


def evaluate(pred_tracks, gt_tracks,
             match_iou: "dict | None" = None) -> EvalReport:
    """Full per-class report at the given (or default) match IoU."""
    match_iou = match_iou or DEFAULT_MATCH_IOU
    report = EvalReport()
    for cls in ObjectClass:
        gts = [t for t in gt_tracks if t.class_id == cls]
        preds = [t for t in pred_tracks if t.class_id == cls]
        if not gts and not preds:
            continue
        thr = match_iou[cls]
        m = ClassMetrics()
        m.ap, m.aph = ap_aph(preds, gts, thr)
        m.mota, m.motp, m.id_switches, counts = mota(preds, gts, thr)
        m.tp, m.fp, m.fn = counts["tp"], counts["fp"], counts["fn"]
        m.gt_count = counts["gt_count"]
        m.recall_at_track = recall_at_track(preds, gts, thr)
        for table_thr in PR_TABLE_IOUS[cls]:
            p, r, *_ = frame_pr(preds, gts, table_thr)
            m.pr_table[table_thr] = (p, r)
        report.per_class[cls.label] = m
    return report


def pr_curve(pred_tracks, gt_tracks, iou_thr: float):
    """(recall, precision) arrays for plotting; empty without gt or preds."""
    records, n_gt = _scored_matches(pred_tracks, gt_tracks, iou_thr)
    if n_gt == 0 or not records:
        return np.zeros(0), np.zeros(0)
    tp = np.cumsum([r[1] for r in records])
    ranks = np.arange(1, len(records) + 1)
    return tp / n_gt, tp / ranks
