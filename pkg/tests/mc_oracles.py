"""Monte-Carlo area/volume oracles for rotated-box overlap, independent of
the polygon-clipping implementation under test.

Intersection area is estimated by uniform sampling over the overlap of the
two boxes' axis-aligned bounding regions (the true intersection is contained
in it); box areas/volumes are exact, so only the intersection term carries
sampling noise.
"""

import math

import numpy as np

from offtrack.geom import Box3D


def _bev_halfdiag(box):
    return 0.5 * math.hypot(box.l, box.w)


def _in_bev(box, xs, ys):
    dx = xs - box.cx
    dy = ys - box.cy
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= box.l / 2) & (np.abs(ly) <= box.w / 2)


def _bev_aabb(box):
    r = _bev_halfdiag(box)
    return box.cx - r, box.cx + r, box.cy - r, box.cy + r


def mc_bev_intersection(a: Box3D, b: Box3D, n: int, seed: int) -> float:
    ax0, ax1, ay0, ay1 = _bev_aabb(a)
    bx0, bx1, by0, by1 = _bev_aabb(b)
    x0, x1 = max(ax0, bx0), min(ax1, bx1)
    y0, y1 = max(ay0, by0), min(ay1, by1)
    if x0 >= x1 or y0 >= y1:
        return 0.0
    rng = np.random.default_rng(seed)
    xs = rng.uniform(x0, x1, n)
    ys = rng.uniform(y0, y1, n)
    hits = _in_bev(a, xs, ys) & _in_bev(b, xs, ys)
    return (x1 - x0) * (y1 - y0) * hits.mean()


def mc_iou_bev(a: Box3D, b: Box3D, n: int = 1_000_000, seed: int = 0) -> float:
    inter = mc_bev_intersection(a, b, n, seed)
    return inter / (a.bev_area() + b.bev_area() - inter)


def mc_overlap_ratio(subject: Box3D, obj: Box3D, n: int = 1_000_000,
                     seed: int = 0) -> float:
    return mc_bev_intersection(subject, obj, n, seed) / obj.bev_area()


def mc_iou_3d(a: Box3D, b: Box3D, n: int = 1_000_000, seed: int = 0) -> float:
    ax0, ax1, ay0, ay1 = _bev_aabb(a)
    bx0, bx1, by0, by1 = _bev_aabb(b)
    x0, x1 = max(ax0, bx0), min(ax1, bx1)
    y0, y1 = max(ay0, by0), min(ay1, by1)
    z0 = max(a.cz - a.h / 2, b.cz - b.h / 2)
    z1 = min(a.cz + a.h / 2, b.cz + b.h / 2)
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        return 0.0
    rng = np.random.default_rng(seed)
    xs = rng.uniform(x0, x1, n)
    ys = rng.uniform(y0, y1, n)
    zs = rng.uniform(z0, z1, n)
    hits = (_in_bev(a, xs, ys) & _in_bev(b, xs, ys)
            & (np.abs(zs - a.cz) <= a.h / 2) & (np.abs(zs - b.cz) <= b.h / 2))
    inter = (x1 - x0) * (y1 - y0) * (z1 - z0) * hits.mean()
    return inter / (a.volume() + b.volume() - inter)


def random_box_pairs(count: int, seed: int):
    """Seeded random rotated box pairs with frequent partial overlap."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        l1, w1, h1 = rng.uniform(0.8, 5.0, 3)
        l2, w2, h2 = rng.uniform(0.8, 5.0, 3)
        cx, cy, cz = rng.uniform(-2.0, 2.0, 3)
        off = rng.uniform(-0.6, 0.6, 3) * np.array([l1, w1, h1])
        a = Box3D(cx, cy, cz, l1, w1, h1, rng.uniform(-np.pi, np.pi))
        b = Box3D(cx + off[0], cy + off[1], cz + off[2],
                  l2, w2, h2, rng.uniform(-np.pi, np.pi))
        pairs.append((a, b))
    return pairs
