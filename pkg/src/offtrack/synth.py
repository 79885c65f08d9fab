"""Seeded synthetic scenarios: ground-truth tracks, surface-sampled LiDAR
points, and corrupted detections for end-to-end verification.

Objects move on static, straight-line, or circular-arc paths. Each frame,
the box faces oriented toward the sensor are sampled uniformly with an
areal density that falls off as 1/r^2 from a 10 m reference, then Gaussian
point noise is applied. Everything is deterministic per seed.

Scenario TOML schema (``scenario.toml``)::

    [scenario]
    frame_count = 200
    seed = 1
    points_per_m2_at_10m = 60.0
    point_noise_sigma = 0.02
    det_center_sigma = 0.1
    det_size_sigma = 0.05
    det_yaw_sigma = 0.03
    fn_rate = 0.1
    fp_per_frame = 1.0
    sensor_start = [0.0, 0.0, 1.8]
    sensor_velocity = [0.0, 0.0, 0.0]

    [[object]]
    class = "vehicle"
    size = [4.6, 2.0, 1.6]
    start = [12.0, 4.0, 0.8]
    yaw = 0.0
    motion = "line"        # static | line | arc
    speed = 3.0            # m/s, line and arc
    arc_rate = 0.1         # rad/s, arc only
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from offtrack.config import ObjectClass
from offtrack.geom import (Box3D, PointCloudFrame, Pose, iou_bev,
                           normalize_angle, points_in_box, transform_points)
from offtrack.ingest import Detection, SequenceBundle
from offtrack.tracker import Track, TrackEntry

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

STATIC = "static"
LINE = "line"
ARC = "arc"

_FP_SIZES = {
    ObjectClass.VEHICLE: (4.5, 2.0, 1.7),
    ObjectClass.PEDESTRIAN: (0.9, 0.9, 1.7),
    ObjectClass.CYCLIST: (1.8, 0.8, 1.7),
}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    class_id: ObjectClass
    size: tuple
    start: tuple
    yaw: float = 0.0
    motion: str = STATIC
    speed: float = 0.0
    arc_rate: float = 0.0
    intensity: float = 0.5

    def box_at(self, t: float) -> Box3D:
        l, w, h = self.size
        x0, y0, z0 = self.start
        if self.motion == STATIC:
            return Box3D(x0, y0, z0, l, w, h, self.yaw)
        if self.motion == LINE:
            return Box3D(x0 + self.speed * t * math.cos(self.yaw),
                         y0 + self.speed * t * math.sin(self.yaw),
                         z0, l, w, h, self.yaw)
        if self.motion == ARC:
            if self.arc_rate == 0.0:
                raise ScenarioError("arc motion requires a nonzero arc_rate")
            r = self.speed / self.arc_rate
            phi = self.yaw + self.arc_rate * t
            x = x0 + r * (math.sin(phi) - math.sin(self.yaw))
            y = y0 - r * (math.cos(phi) - math.cos(self.yaw))
            return Box3D(x, y, z0, l, w, h, normalize_angle(phi))
        raise ScenarioError(f"unknown motion model {self.motion!r}")

    @property
    def arc_radius(self) -> float:
        return self.speed / self.arc_rate if self.arc_rate else math.inf


@dataclass(frozen=True)
class ScenarioConfig:
    objects: tuple
    frame_count: int = 200
    frame_dt_us: int = 100_000  # 10 Hz
    sensor_start: tuple = (0.0, 0.0, 1.8)
    sensor_velocity: tuple = (0.0, 0.0, 0.0)
    points_per_m2_at_10m: float = 60.0
    point_noise_sigma: float = 0.0
    det_center_sigma: float = 0.0
    det_size_sigma: float = 0.0
    det_yaw_sigma: float = 0.0
    fn_rate: float = 0.0
    fp_per_frame: float = 0.0
    score_a: float = 1.0
    score_b: float = -3.0
    occlusion: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 1:
            raise ScenarioError("frame_count must be >= 1")
        for name in ("fn_rate",):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{name} must be in [0, 1]")
        for name in ("point_noise_sigma", "det_center_sigma", "det_size_sigma",
                     "det_yaw_sigma", "fp_per_frame"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be >= 0")
        boxes = [o.box_at(0.0) for o in self.objects]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if iou_bev(boxes[i], boxes[j]) > 0.0:
                    raise ScenarioError(
                        f"objects {i} and {j} overlap at t=0; adjust starts")

    def sensor_at(self, t: float) -> np.ndarray:
        return np.asarray(self.sensor_start) + np.asarray(self.sensor_velocity) * t


# Face index -> (axis, sign); axis 0 is box-local x (length l), etc.
_FACES = [(0, +1), (0, -1), (1, +1), (1, -1), (2, +1), (2, -1)]


def _sample_box_faces(box: Box3D, sensor: np.ndarray, density_at_10m: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the box faces visible from the sensor, in world
    coordinates, with 1/r^2 density falloff. Returns (N, 3)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    half = box.size / 2.0
    rel = sensor - box.center
    out = []
    for axis, sign in _FACES:
        normal = sign * rot[:, axis]
        if float(normal @ rel) <= 0.0:
            continue
        center_local = np.zeros(3)
        center_local[axis] = sign * half[axis]
        r = float(np.linalg.norm(rel - rot @ center_local))
        u_axis, v_axis = [a for a in range(3) if a != axis]
        area = box.size[u_axis] * box.size[v_axis]
        expected = density_at_10m * (10.0 / max(r, 1.0)) ** 2 * area
        n = int(rng.poisson(expected))
        if n == 0:
            continue
        local = np.zeros((n, 3))
        local[:, axis] = sign * half[axis]
        local[:, u_axis] = rng.uniform(-half[u_axis], half[u_axis], n)
        local[:, v_axis] = rng.uniform(-half[v_axis], half[v_axis], n)
        out.append(local @ rot.T + box.center)
    if not out:
        return np.empty((0, 3))
    return np.vstack(out)


def _segment_hits_box(origin: np.ndarray, pts: np.ndarray, box: Box3D) -> np.ndarray:
    """Slab test: does the open segment origin->point pass through the box."""
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    from offtrack.geom import to_box_local
    o = to_box_local(box, origin.reshape(1, 3))[0]
    p = to_box_local(box, pts)
    d = p - o
    half = box.size / 2.0
    t0 = np.zeros(len(pts))
    t1 = np.ones(len(pts))
    ok = np.ones(len(pts), dtype=bool)
    for a in range(3):
        da = d[:, a]
        parallel = np.abs(da) < 1e-12
        ok &= ~(parallel & (np.abs(o[a]) > half[a]))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-half[a] - o[a]) / da
            tb = (half[a] - o[a]) / da
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        t0 = np.where(parallel, t0, np.maximum(t0, lo))
        t1 = np.where(parallel, t1, np.minimum(t1, hi))
    # Entry strictly before the point itself (exclude the target surface).
    return ok & (t0 < t1) & (t1 > 0.0) & (t0 < 1.0 - 1e-9)


def generate(config: ScenarioConfig) -> SequenceBundle:
    """Build the full bundle: frames with points/poses and gt tracks (no
    detections; see :func:`corrupt`)."""
    rng = np.random.default_rng([config.seed, 0])
    dt = config.frame_dt_us / 1e6
    frames = []
    gt_boxes = [[spec.box_at(i * dt) for spec in config.objects]
                for i in range(config.frame_count)]

    for i in range(config.frame_count):
        t = i * dt
        sensor = config.sensor_at(t)
        pose = Pose.from_yaw_translation(0.0, sensor)
        clouds = []
        feats = []
        for oi, spec in enumerate(config.objects):
            pts = _sample_box_faces(gt_boxes[i][oi], sensor,
                                    config.points_per_m2_at_10m, rng)
            if config.occlusion and len(pts):
                occluded = np.zeros(len(pts), dtype=bool)
                for oj in range(len(config.objects)):
                    if oj != oi:
                        occluded |= _segment_hits_box(sensor, pts, gt_boxes[i][oj])
                pts = pts[~occluded]
            if config.point_noise_sigma > 0 and len(pts):
                pts = pts + rng.normal(0.0, config.point_noise_sigma, pts.shape)
            clouds.append(pts)
            feats.append(np.full((len(pts), 2), [spec.intensity, 0.0]))
        world = np.vstack(clouds) if clouds else np.empty((0, 3))
        extra = np.vstack(feats) if feats else np.empty((0, 2))
        local = transform_points(world, pose.inverse()) if len(world) else world
        points = np.hstack([local, extra]) if len(world) else np.empty((0, 5))
        frames.append(PointCloudFrame(i, int(i * config.frame_dt_us), points, pose))

    gt_tracks = []
    for oi, spec in enumerate(config.objects):
        entries = [TrackEntry(i, gt_boxes[i][oi], 1.0, True)
                   for i in range(config.frame_count)]
        gt_tracks.append(Track(oi, spec.class_id, entries, birth_frame=0,
                               name=f"obj{oi}"))

    detections = [[] for _ in range(config.frame_count)]
    return SequenceBundle(f"synth-{config.seed}", frames, detections, gt_tracks)


def _scene_extent(bundle: SequenceBundle):
    boxes = [e.box for t in bundle.gt_tracks for e in t.entries]
    if not boxes:
        return (-20.0, 20.0), (-20.0, 20.0)
    xs = [b.cx for b in boxes]
    ys = [b.cy for b in boxes]
    return (min(xs) - 10.0, max(xs) + 10.0), (min(ys) - 10.0, max(ys) + 10.0)


def corrupt(bundle: SequenceBundle, config: ScenarioConfig) -> SequenceBundle:
    """Detections from gt: per box, drop with probability fn_rate, else
    jitter center/size/yaw; add uniformly placed low-score false positives.
    Scores of surviving boxes follow a logistic in the box's point count."""
    rng = np.random.default_rng([config.seed, 1])
    world_pts = [
        transform_points(f.points[:, :3], f.pose) if f.num_points else np.empty((0, 3))
        for f in bundle.frames]

    def score_of(frame_index, box):
        n = int(points_in_box(box, world_pts[frame_index]).sum())
        s = 1.0 / (1.0 + math.exp(-(config.score_a * math.log(n + 1) + config.score_b)))
        return min(max(s, 0.0), 1.0), n

    detections = [[] for _ in bundle.frames]
    for track in bundle.gt_tracks:
        for e in track.entries:
            # Noise draws are unconditional so that configs differing only in
            # sigma share the same FN pattern and jitter directions.
            drop = rng.uniform() < config.fn_rate
            center_eps = rng.normal(0.0, 1.0, 3)
            size_eps = rng.normal(0.0, 1.0, 3)
            yaw_eps = rng.normal(0.0, 1.0)
            if drop:
                continue
            b = e.box
            center = b.center + config.det_center_sigma * center_eps
            size = np.maximum(b.size + config.det_size_sigma * size_eps, 0.1)
            yaw = b.yaw + config.det_yaw_sigma * yaw_eps
            jittered = Box3D(center[0], center[1], center[2],
                             size[0], size[1], size[2], yaw)
            score, n = score_of(e.frame_index, jittered)
            detections[e.frame_index].append(
                Detection(jittered, score, track.class_id, e.frame_index, n))

    (x0, x1), (y0, y1) = _scene_extent(bundle)
    classes = sorted({t.class_id for t in bundle.gt_tracks}) or [ObjectClass.VEHICLE]
    for i in range(len(bundle.frames)):
        for _ in range(int(rng.poisson(config.fp_per_frame))):
            cls = classes[int(rng.integers(len(classes)))]
            l, w, h = _FP_SIZES[cls]
            box = Box3D(rng.uniform(x0, x1), rng.uniform(y0, y1), h / 2,
                        l, w, h, rng.uniform(-math.pi, math.pi))
            n = int(points_in_box(box, world_pts[i]).sum())
            detections[i].append(
                Detection(box, float(rng.uniform(0.02, 0.3)), cls, i, n))

    return SequenceBundle(bundle.sequence_id, bundle.frames, detections,
                          bundle.gt_tracks)


# ---------------------------------------------------------------------------
# TOML loading


def scenario_from_toml(path) -> ScenarioConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    sc = raw.get("scenario", {})
    objects = []
    for o in raw.get("object", []):
        objects.append(ObjectSpec(
            class_id=ObjectClass.from_label(o["class"]),
            size=tuple(o["size"]),
            start=tuple(o["start"]),
            yaw=float(o.get("yaw", 0.0)),
            motion=o.get("motion", STATIC),
            speed=float(o.get("speed", 0.0)),
            arc_rate=float(o.get("arc_rate", 0.0)),
            intensity=float(o.get("intensity", 0.5)),
        ))
    kwargs = {k: sc[k] for k in (
        "frame_count", "frame_dt_us", "points_per_m2_at_10m",
        "point_noise_sigma", "det_center_sigma", "det_size_sigma",
        "det_yaw_sigma", "fn_rate", "fp_per_frame", "score_a", "score_b",
        "occlusion", "seed") if k in sc}
    if "sensor_start" in sc:
        kwargs["sensor_start"] = tuple(sc["sensor_start"])
    if "sensor_velocity" in sc:
        kwargs["sensor_velocity"] = tuple(sc["sensor_velocity"])
    return ScenarioConfig(objects=tuple(objects), **kwargs)
