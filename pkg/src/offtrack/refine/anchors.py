"""Per-class template sizes for the geometry head, fit by k-means over
training ground-truth sizes (the size classes the head classifies into)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ANCHOR_COUNT = 3


@dataclass(frozen=True)
class SizeAnchorTable:
    anchors: np.ndarray  # (A, 3), rows sorted lexicographically

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        if len(a) < 1 or (a <= 0).any():
            raise ValueError("anchors must be a non-empty positive (A, 3) table")
        object.__setattr__(self, "anchors", a)

    @property
    def count(self) -> int:
        return len(self.anchors)

    def nearest(self, size) -> int:
        """Index of the anchor closest in mean L1; ties go to the lower index."""
        d = np.abs(self.anchors - np.asarray(size)).mean(axis=1)
        return int(np.argmin(d))


def fit_size_anchors(sizes, k: int = DEFAULT_ANCHOR_COUNT, seed: int = 0,
                     iterations: int = 25) -> SizeAnchorTable:
    """Seeded Lloyd k-means over (N, 3) sizes; anchors returned in canonical
    (lexicographic) order so anchor indices are stable."""
    pts = np.asarray(sizes, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot fit anchors on an empty size set")
    k = min(k, len(np.unique(pts, axis=0)))
    rng = np.random.default_rng(seed)
    centers = pts[rng.choice(len(pts), size=k, replace=False)]
    for _ in range(iterations):
        d = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=-1)
        assign = d.argmin(axis=1)
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                centers[j] = pts[d.min(axis=1).argmax()]
    order = np.lexsort(centers.T[::-1])
    return SizeAnchorTable(centers[order])
