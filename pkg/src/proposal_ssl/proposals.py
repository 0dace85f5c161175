"""Spherical region proposals: FPS center selection and radius grouping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import CorrespondenceMap
from .pointcloud import PointCloud

__all__ = [
    "ProposalSet",
    "farthest_point_sampling",
    "radius_group",
    "generate_paired_proposals",
]


@dataclass(frozen=True)
class ProposalSet:
    """N spherical proposals: a center id plus K member ids each."""

    centers: np.ndarray   # (N,) int64 point ids
    members: np.ndarray   # (N, K) int64 point ids
    radius: float
    view_tag: str         # view1 | view2

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.int64)
        members = np.asarray(self.members, dtype=np.int64)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "members", members)
        if len(np.unique(centers)) != len(centers):
            raise ValueError("proposal centers must be distinct")
        if members.shape[0] != len(centers):
            raise ValueError("members row count does not match centers")

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def k(self) -> int:
        return self.members.shape[1]


def farthest_point_sampling(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection of `n` indices, ties broken by lowest index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if n > len(points):
        raise ValueError(f"cannot sample {n} from {len(points)} points")
    if not 0 <= start < len(points):
        raise ValueError(f"start index {start} out of range")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    min_d2 = ((points - points[start]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))  # argmax takes the first (lowest) index on ties
        selected[i] = nxt
        d2 = ((points - points[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return selected


def radius_group(points: np.ndarray, center: int, r: float, k: int) -> np.ndarray:
    """Up to k nearest indices within radius r of `center`, center first.

    Fewer than k qualifying points pad the result by repeating the center.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    if k < 1:
        raise ValueError("k must be at least 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d2 = ((points - points[center]) ** 2).sum(axis=1)
    within = np.flatnonzero(d2 <= r * r)
    within = within[within != center]
    order = within[np.argsort(d2[within], kind="stable")]
    out = np.full(k, center, dtype=np.int64)
    take = min(k - 1, len(order))
    out[1:1 + take] = order[:take]
    return out


def generate_paired_proposals(x0: PointCloud, x1: PointCloud, x2: PointCloud,
                              m: CorrespondenceMap, n: int, r: float, k: int,
                              ) -> tuple[ProposalSet, ProposalSet]:
    """Sample N shared centers on the original frame and group per view.

    Centers come from FPS on x0 restricted to ids present in the
    correspondence map, so every proposal exists in both views; proposal i
    of the two outputs is a positive pair.
    """
    shared_ids = m.pairs[:, 0]
    if len(shared_ids) < n:
        raise ValueError(
            f"only {len(shared_ids)} shared ids, cannot sample {n} proposals")

    row_of = x0.id_to_row()
    shared_sorted = np.sort(shared_ids)
    rows0 = np.array([row_of[int(i)] for i in shared_sorted], dtype=np.int64)
    coords0 = x0.points[rows0]
    fps_idx = farthest_point_sampling(coords0, n, start=0)  # start at lowest id
    center_ids = shared_sorted[fps_idx]

    sets = []
    for view, tag in ((x1, "view1"), (x2, "view2")):
        rmap = view.id_to_row()
        members = np.empty((n, k), dtype=np.int64)
        for i, cid in enumerate(center_ids):
            rows = radius_group(view.points, rmap[int(cid)], r, k)
            members[i] = view.ids[rows]
        sets.append(ProposalSet(center_ids, members, r, tag))
    return sets[0], sets[1]
