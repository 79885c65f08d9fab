"""Pipeline orchestration: the stage graph

    track (fwd + rev) -> fuse -> prepare -> refine -> labels -> eval

with content-hash caching. Each stage records the sha256 of its inputs
(files plus the relevant config) and outputs in ``manifest.json``;
re-running with unchanged inputs skips the stage. Failures leave partial
artifacts in place and mark the failing stage in the manifest.

Refinement is optional: without a checkpoint directory, tracks pass through
unrefined (the tracker output becomes the labels). Label files are written
in per-frame sensor coordinates with scores normalized to [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from offtrack import ingest
from offtrack.config import ClassThresholds, ObjectClass, load_thresholds, read_config_file
from offtrack.geom import Box3D
from offtrack.metrics import evaluate
from offtrack.objprep import ObjectSample, ROI_SCALE_DEFAULT, extract_object_points
from offtrack.refine.apply import RefinerSet, export_score, refine_or_passthrough
from offtrack.refine.models import CRM_ARCH, GRM_ARCH, PRM_ARCH, load_refiner
from offtrack.tracker import FORWARD, REVERSE, fuse_forward_reverse, route_tracks, run

LOGGER = logging.getLogger("offtrack.pipeline")

STAGES = ("track", "fuse", "prepare", "refine", "labels", "eval")


@dataclass
class PipelineConfig:
    input_dir: Path
    work_dir: Path
    checkpoint_dir: "Path | None" = None
    thresholds: ClassThresholds = field(default_factory=ClassThresholds)
    roi_alpha: float = ROI_SCALE_DEFAULT
    seed: int = 0
    jobs: int = 1
    normalize_scores: bool = True
    inference_dtype: str = "float32"
    config_path: "Path | None" = None

    @staticmethod
    def from_file(input_dir, work_dir, config_path=None, **overrides) -> "PipelineConfig":
        raw = read_config_file(config_path)
        pipe = raw.get("pipeline", {})
        kwargs = dict(
            input_dir=Path(input_dir),
            work_dir=Path(work_dir),
            thresholds=load_thresholds(config_path),
            roi_alpha=float(raw.get("objprep", {}).get("alpha", ROI_SCALE_DEFAULT)),
            seed=int(pipe.get("seed", 0)),
            jobs=int(pipe.get("jobs", 1)),
            normalize_scores=bool(pipe.get("normalize_scores", True)),
            inference_dtype=str(pipe.get("inference_dtype", "float32")),
            config_path=Path(config_path) if config_path else None,
        )
        if pipe.get("checkpoint_dir"):
            kwargs["checkpoint_dir"] = Path(pipe["checkpoint_dir"])
        for key, value in overrides.items():
            if value is not None:
                kwargs[key] = value
        return PipelineConfig(**kwargs)

    def params_digest(self) -> str:
        thr = {name: {c.label: v for c, v in getattr(self.thresholds, name).items()}
               for name in (self.thresholds._RATIO_FIELDS
                            + self.thresholds._COUNT_FIELDS)}
        blob = json.dumps({
            "thresholds": thr,
            "roi_alpha": self.roi_alpha,
            "seed": self.seed,
            "normalize_scores": self.normalize_scores,
            "inference_dtype": self.inference_dtype,
        }, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, work_dir: Path):
        self.path = work_dir / "manifest.json"
        self.data = {}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))

    def stage_fresh(self, stage: str, inputs: dict) -> bool:
        entry = self.data.get(stage)
        if not entry or entry.get("failed"):
            return False
        if entry.get("inputs") != inputs:
            return False
        for rel, digest in entry.get("outputs", {}).items():
            p = self.path.parent / rel
            if not p.exists() or _sha256(p) != digest:
                return False
        return True

    def record(self, stage: str, inputs: dict, output_paths):
        outputs = {str(Path(p).relative_to(self.path.parent)): _sha256(Path(p))
                   for p in output_paths}
        self.data[stage] = {"inputs": inputs, "outputs": outputs}
        self._write()

    def record_failure(self, stage: str, message: str):
        self.data[stage] = {"failed": True, "error": message}
        self._write()


def _input_digests(config: PipelineConfig, stage: str, files) -> dict:
    digests = {"params": config.params_digest(), "stage": stage}
    for f in files:
        p = Path(f)
        digests[p.name] = _sha256(p) if p.exists() else "missing"
    return digests


# ---------------------------------------------------------------------------
# sample serialization (prepare stage artifact)


def save_samples(samples, path: Path) -> None:
    """Deterministic little-endian binary: per track the id, class, frames,
    and per frame the box, score and float32 point rows."""
    out = bytearray()
    out += struct.pack("<I", len(samples))
    for s in samples:
        out += struct.pack("<qBI", s.track_id, int(s.class_id), s.length)
        for i in range(s.length):
            pts = np.ascontiguousarray(s.per_frame_points[i], dtype="<f4")
            out += struct.pack("<I", s.frame_indices[i])
            out += struct.pack("<7d", *s.boxes[i].to_array())
            out += struct.pack("<d", s.scores[i])
            out += struct.pack("<I", pts.shape[0])
            out += pts.tobytes()
    Path(path).write_bytes(bytes(out))


def load_samples(path: Path):
    raw = Path(path).read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, raw, off)
        off += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    samples = []
    for _ in range(count):
        track_id, cls, n_frames = take("<qBI")
        frames, boxes, scores, points = [], [], [], []
        for _ in range(n_frames):
            (fi,) = take("<I")
            boxes.append(Box3D.from_array(take("<7d")))
            scores.append(take("<d")[0])
            frames.append(fi)
            (n_pts,) = take("<I")
            pts = np.frombuffer(raw, dtype="<f4", count=n_pts * 5,
                                offset=off).reshape(n_pts, 5).astype(np.float64)
            off += n_pts * 20
            points.append(pts)
        samples.append(ObjectSample(track_id, ObjectClass(cls), frames, boxes,
                                    scores, points))
    return samples


# ---------------------------------------------------------------------------
# stages


def _load_models(checkpoint_dir: "Path | None", dtype: str,
                 seed: int) -> "dict | None":
    """Per-class RefinerSet from <dir>/<kind>_<class>.oftk files."""
    if checkpoint_dir is None:
        return None
    checkpoint_dir = Path(checkpoint_dir)
    out = {}
    for cls in ObjectClass:
        paths = {kind: checkpoint_dir / f"{kind}_{cls.label}.oftk"
                 for kind in ("grm", "prm", "crm")}
        if not all(p.exists() for p in paths.values()):
            continue
        models = {kind: load_refiner(p) for kind, p in paths.items()}
        if dtype == "float32":
            for m in models.values():
                m.cast(np.float32)
        out[cls] = RefinerSet(models["grm"], models["prm"], models["crm"],
                              seed=seed)
    return out or None


def stage_track(config: PipelineConfig, bundle):
    fwd = run(bundle, config.thresholds, FORWARD)
    rev = run(bundle, config.thresholds, REVERSE)
    ingest.save_tracks(fwd, config.work_dir / "tracks_forward.jsonl")
    ingest.save_tracks(rev, config.work_dir / "tracks_reverse.jsonl")
    return fwd, rev


def stage_fuse(config: PipelineConfig):
    fwd = ingest.load_tracks(config.work_dir / "tracks_forward.jsonl")
    rev = ingest.load_tracks(config.work_dir / "tracks_reverse.jsonl")
    fused = fuse_forward_reverse(fwd, rev)
    ingest.save_tracks(fused, config.work_dir / "tracks.jsonl")
    return fused


def stage_prepare(config: PipelineConfig, bundle):
    fused = ingest.load_tracks(config.work_dir / "tracks.jsonl")
    refinable, passthrough = route_tracks(fused, config.thresholds)
    samples = [extract_object_points(t, bundle.frames, config.roi_alpha)
               for t in refinable]
    save_samples(samples, config.work_dir / "samples.bin")
    routing = {"refinable": [t.track_id for t in refinable],
               "passthrough": [t.track_id for t in passthrough]}
    (config.work_dir / "routing.json").write_text(
        json.dumps(routing, indent=2, sort_keys=True))
    return samples


_WORKER_MODELS = None


def _worker_init(checkpoint_dir, dtype, seed):
    global _WORKER_MODELS
    _WORKER_MODELS = _load_models(Path(checkpoint_dir) if checkpoint_dir else None,
                                  dtype, seed)


def _worker_refine(args):
    track, sample = args
    models = (_WORKER_MODELS or {}).get(track.class_id)
    return refine_or_passthrough(track, sample, models)


def stage_refine(config: PipelineConfig):
    fused = ingest.load_tracks(config.work_dir / "tracks.jsonl")
    routing = json.loads((config.work_dir / "routing.json").read_text())
    samples = {s.track_id: s for s in load_samples(config.work_dir / "samples.bin")}
    by_id = {t.track_id: t for t in fused}
    refinable = [by_id[i] for i in routing["refinable"]]
    passthrough = [by_id[i] for i in routing["passthrough"]]

    jobs = [(t, samples[t.track_id]) for t in refinable]
    if config.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(
                max_workers=config.jobs, initializer=_worker_init,
                initargs=(str(config.checkpoint_dir) if config.checkpoint_dir
                          else None, config.inference_dtype, config.seed)) as pool:
            refined = list(pool.map(_worker_refine, jobs, chunksize=1))
    else:
        models = _load_models(config.checkpoint_dir, config.inference_dtype,
                              config.seed)
        refined = [refine_or_passthrough(t, s, (models or {}).get(t.class_id))
                   for t, s in jobs]

    final = sorted(refined + passthrough, key=lambda t: t.track_id)
    ingest.save_tracks(final, config.work_dir / "refined.jsonl")
    return final


def stage_labels(config: PipelineConfig, bundle):
    """Final auto labels in per-frame sensor coordinates."""
    from offtrack.geom import transform_box
    final = ingest.load_tracks(config.work_dir / "refined.jsonl")
    inverse_poses = {f.frame_index: f.pose.inverse() for f in bundle.frames}
    rows = []
    for t in final:
        for e in t.entries:
            if not e.updated:
                continue
            local = transform_box(e.box, inverse_poses[e.frame_index])
            rows.append({
                "frame_index": e.frame_index,
                "track_id": t.track_id,
                "class": t.class_id.label,
                "box": [float(v) for v in local.to_array()],
                "score": export_score(e.score, config.normalize_scores),
            })
    rows.sort(key=lambda r: (r["frame_index"], r["track_id"]))
    with open(config.work_dir / "labels.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    return rows


def stage_eval(config: PipelineConfig, bundle):
    if not bundle.gt_tracks:
        LOGGER.info("no ground truth; skipping eval stage")
        return None
    from offtrack.metrics import DEFAULT_MATCH_IOU, pr_curve
    final = ingest.load_tracks(config.work_dir / "refined.jsonl")
    report = evaluate(final, bundle.gt_tracks)
    (config.work_dir / "report.json").write_text(report.to_json())
    curves = {}
    for cls in ObjectClass:
        preds = [t for t in final if t.class_id == cls]
        gts = [t for t in bundle.gt_tracks if t.class_id == cls]
        if not gts:
            continue
        recall, precision = pr_curve(preds, gts, DEFAULT_MATCH_IOU[cls])
        curves[cls.label] = {"recall": [round(float(v), 6) for v in recall],
                             "precision": [round(float(v), 6) for v in precision]}
    (config.work_dir / "pr_curves.json").write_text(
        json.dumps(curves, indent=2, sort_keys=True))
    return report


_STAGE_OUTPUTS = {
    "track": ("tracks_forward.jsonl", "tracks_reverse.jsonl"),
    "fuse": ("tracks.jsonl",),
    "prepare": ("samples.bin", "routing.json"),
    "refine": ("refined.jsonl",),
    "labels": ("labels.jsonl",),
    "eval": ("report.json", "pr_curves.json"),
}

_STAGE_INPUT_FILES = {
    "track": (),
    "fuse": ("tracks_forward.jsonl", "tracks_reverse.jsonl"),
    "prepare": ("tracks.jsonl",),
    "refine": ("tracks.jsonl", "samples.bin", "routing.json"),
    "labels": ("refined.jsonl",),
    "eval": ("refined.jsonl",),
}


def run_pipeline(config: PipelineConfig, stages=None) -> int:
    """Run (or resume) the stage graph, or just the named stages; returns a
    process exit code."""
    config.work_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(config.work_dir)
    bundle = ingest.load_sequence(config.input_dir)

    input_files = [config.input_dir / "frames.jsonl",
                   config.input_dir / "detections.jsonl"]
    checkpoint_files = []
    if config.checkpoint_dir and Path(config.checkpoint_dir).exists():
        checkpoint_files = sorted(Path(config.checkpoint_dir).glob("*.oftk"))

    def digests_for(stage):
        files = list(input_files) if stage == "track" else []
        files += [config.work_dir / f for f in _STAGE_INPUT_FILES[stage]]
        if stage in ("refine",):
            files += checkpoint_files
        if stage == "eval":
            files.append(config.input_dir / "gt_tracks.jsonl")
        return _input_digests(config, stage, files)

    actions = {
        "track": lambda: stage_track(config, bundle),
        "fuse": lambda: stage_fuse(config),
        "prepare": lambda: stage_prepare(config, bundle),
        "refine": lambda: stage_refine(config),
        "labels": lambda: stage_labels(config, bundle),
        "eval": lambda: stage_eval(config, bundle),
    }

    if stages is None:
        stages = STAGES
    for stage in stages:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        if stage == "eval" and not bundle.gt_tracks:
            LOGGER.info("stage eval skipped (no gt_tracks.jsonl)")
            continue
        inputs = digests_for(stage)
        if manifest.stage_fresh(stage, inputs):
            LOGGER.info("stage %s up to date; skipping", stage)
            continue
        LOGGER.info("stage %s running", stage)
        try:
            actions[stage]()
        except Exception as exc:
            manifest.record_failure(stage, f"{type(exc).__name__}: {exc}")
            LOGGER.error("stage %s failed: %s", stage, exc)
            return 1
        outputs = [config.work_dir / f for f in _STAGE_OUTPUTS[stage]
                   if (config.work_dir / f).exists()]
        manifest.record(stage, inputs, outputs)
    return 0
