"""Core 3D geometry: oriented boxes, rigid poses, IoU and overlap kernels.

Boxes are 7-DoF: center (cx, cy, cz), extents (l, w, h) along the box-local
x/y/z axes, and yaw about +Z (counterclockwise, normalized to (-pi, pi]).
Poses are gravity-aligned rigid transforms: full SO(3) rotations would make
the yaw of a 7-DoF box ill-defined, so any pose whose rotation tilts +Z is
rejected.

BEV intersection of rotated rectangles uses Sutherland-Hodgman convex
clipping with shoelace area; |cross| < 1e-12 is treated as on-edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EDGE_EPS = 1e-12
_TILT_EPS = 1e-3


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi] (half-open at -pi)."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def angle_diff(a: float, b: float) -> float:
    """Smallest absolute difference between two angles, in [0, pi]."""
    d = math.fmod(abs(a - b), 2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: geometric center, positive extents, yaw about +Z."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "l", "w", "h", "yaw"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"Box3D.{name} must be finite, got {v}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box3D extents must be positive, got "
                             f"l={self.l}, w={self.w}, h={self.h}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h], dtype=np.float64)

    def bev_area(self) -> float:
        return self.l * self.w

    def volume(self) -> float:
        return self.l * self.w * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz,
                         self.l, self.w, self.h, self.yaw], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box3D":
        cx, cy, cz, l, w, h, yaw = (float(v) for v in arr)
        return Box3D(cx, cy, cz, l, w, h, yaw)


@dataclass(frozen=True)
class Pose:
    """Gravity-aligned rigid transform mapping local points to world."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("Pose entries must be finite")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("Pose rotation must be orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("Pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw_translation(yaw: float, translation) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Pose(r, np.asarray(translation, dtype=np.float64))

    def z_yaw(self) -> float:
        """Z-rotation angle of the pose; raises if the pose tilts +Z."""
        tilt = abs(self.rotation[2, 2] - 1.0)
        off = max(abs(self.rotation[0, 2]), abs(self.rotation[1, 2]),
                  abs(self.rotation[2, 0]), abs(self.rotation[2, 1]))
        if tilt > _TILT_EPS or off > _TILT_EPS:
            raise ValueError("pose is not gravity-aligned (rotation tilts +Z)")
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Pose equal to applying `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def to_flat(self) -> list:
        """Row-major [r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2]."""
        m = np.hstack([self.rotation, self.translation.reshape(3, 1)])
        return [float(v) for v in m.reshape(-1)]

    @staticmethod
    def from_flat(vals) -> "Pose":
        m = np.asarray(vals, dtype=np.float64).reshape(3, 4)
        return Pose(m[:, :3], m[:, 3])


@dataclass(frozen=True)
class PointCloudFrame:
    """One LiDAR frame: N x 5 points (x, y, z, intensity, elongation) in
    sensor coordinates plus the sensor-to-world pose."""

    frame_index: int
    timestamp_us: int
    points: np.ndarray
    pose: Pose

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 5)
        if not np.isfinite(pts).all():
            raise ValueError(f"frame {self.frame_index}: non-finite points")
        object.__setattr__(self, "points", pts)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# Corners and local coordinates

# Bottom face counterclockwise in BEV starting at (+l/2, +w/2, -h/2) in the
# box frame, then the top face in matching order.
_CORNER_SIGNS = np.array([
    [+1, +1, -1],
    [-1, +1, -1],
    [-1, -1, -1],
    [+1, -1, -1],
    [+1, +1, +1],
    [-1, +1, +1],
    [-1, -1, +1],
    [+1, -1, +1],
], dtype=np.float64)


def local_corners(box: Box3D) -> np.ndarray:
    """The 8 canonical corners in the box frame, shape (8, 3)."""
    return _CORNER_SIGNS * (box.size / 2.0)


def corners(box: Box3D) -> np.ndarray:
    """The 8 canonical corners in the box's parent frame, shape (8, 3)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = local_corners(box)
    out = np.empty_like(local)
    out[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
    out[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
    out[:, 2] = local[:, 2] + box.cz
    return out


def bev_corners(box: Box3D) -> np.ndarray:
    """BEV footprint corners (counterclockwise), shape (4, 2)."""
    return corners(box)[:4, :2]


def to_box_local(box: Box3D, points: np.ndarray) -> np.ndarray:
    """Express points in the box frame: translate by -center, rotate by -yaw.

    Accepts (..., 3) or (..., 3+K) arrays; extra columns pass through.
    """
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[..., 0] - box.cx
    dy = pts[..., 1] - box.cy
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = pts[..., 2] - box.cz
    return out


def from_box_local(box: Box3D, points: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_box_local`."""
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + box.cx
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + box.cy
    out[..., 2] = pts[..., 2] + box.cz
    return out


def transform_box(box: Box3D, pose: Pose) -> Box3D:
    """Apply a gravity-aligned rigid transform to a box.

    Dimensions are unchanged; yaw picks up the pose's Z-rotation. Raises
    ValueError for poses that tilt +Z by more than 1e-3 rad.
    """
    yaw = pose.z_yaw()
    center = pose.rotation @ box.center + pose.translation
    return Box3D(center[0], center[1], center[2],
                 box.l, box.w, box.h, box.yaw + yaw)


def transform_points(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Apply a rigid transform to (..., 3) or (..., 3+K) points; extra
    feature columns pass through unchanged."""
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    out[..., :3] = pts[..., :3] @ pose.rotation.T + pose.translation
    return out


def points_in_box(box: Box3D, points: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Boolean mask of points inside the (optionally scaled) box.

    Boundary is closed: a point exactly on a face counts as inside.
    """
    local = to_box_local(box, np.asarray(points)[..., :3])
    half = (box.size * scale) / 2.0
    return np.all(np.abs(local) <= half, axis=-1)


# ---------------------------------------------------------------------------
# BEV polygon clipping

def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as (N, 2) vertices (ccw positive)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject polygon by a convex
    counterclockwise clip polygon."""
    output = [tuple(p) for p in subject]
    n_clip = len(clip)
    for i in range(n_clip):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n_clip]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []
        prev = inputs[-1]
        prev_side = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0])
        for cur in inputs:
            cur_side = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0])
            cur_in = cur_side >= -_EDGE_EPS
            prev_in = prev_side >= -_EDGE_EPS
            if cur_in != prev_in:
                t = prev_side / (prev_side - cur_side)
                output.append((prev[0] + t * (cur[0] - prev[0]),
                               prev[1] + t * (cur[1] - prev[1])))
            if cur_in:
                output.append(cur)
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=np.float64) if output else np.empty((0, 2))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Exact BEV footprint intersection area of two boxes."""
    # Cheap reject: footprints cannot meet beyond the sum of circumradii.
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    inter = _clip_polygon(bev_corners(a), bev_corners(b))
    return _polygon_area(inter)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """BEV IoU of two oriented boxes, exact via convex clipping."""
    inter = bev_intersection_area(a, b)
    union = a.bev_area() + b.bev_area() - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection times vertical overlap, over union volume."""
    inter_bev = bev_intersection_area(a, b)
    if inter_bev == 0.0:
        return 0.0
    zlo = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    zhi = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    dz = max(0.0, zhi - zlo)
    inter = inter_bev * dz
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def overlap_ratio(subject: Box3D, obj: Box3D) -> float:
    """BEV intersection area over the *object* box's BEV area.

    Asymmetric by design: equals 1 whenever the object footprint lies fully
    inside the subject footprint, however small the object is.
    """
    inter = bev_intersection_area(subject, obj)
    return min(1.0, inter / obj.bev_area())


def iou_bev_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise BEV IoU between two box sequences, shape (len(a), len(b)).

    Gated by circumradius distance so far-apart pairs skip clipping.
    """
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    ca = np.array([[b.cx, b.cy] for b in boxes_a])
    cb = np.array([[b.cx, b.cy] for b in boxes_b])
    ra = np.array([0.5 * math.hypot(b.l, b.w) for b in boxes_a])
    rb = np.array([0.5 * math.hypot(b.l, b.w) for b in boxes_b])
    dist = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=-1)
    near = dist <= (ra[:, None] + rb[None, :])
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = iou_bev(boxes_a[i], boxes_b[j])
    return out
