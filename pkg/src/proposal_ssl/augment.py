"""Dual-view augmentation: rigid transforms, point dropout, correspondence map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud

__all__ = [
    "AugmentParams",
    "DropoutConfig",
    "CorrespondenceMap",
    "apply_rigid_augment",
    "random_augment_params",
    "sample_views",
]


@dataclass(frozen=True)
class AugmentParams:
    """One view's rigid transform: rotation about z, axis flips, uniform scale."""

    rotation_deg: float = 0.0   # [-180, 180]
    scale: float = 1.0          # [0.8, 1.2]
    flip_x: bool = False
    flip_y: bool = False
    seed: int = 0

    def __post_init__(self):
        if not -180.0 <= self.rotation_deg <= 180.0:
            raise ValueError(f"rotation_deg out of range: {self.rotation_deg}")
        if not 0.8 <= self.scale <= 1.2:
            raise ValueError(f"scale out of range: {self.scale}")

    @staticmethod
    def identity() -> "AugmentParams":
        return AugmentParams()


@dataclass(frozen=True)
class DropoutConfig:
    """Per-view sample counts; shared_sample points appear in both views."""

    total_sample: int = 100_000
    shared_sample: int = 20_000

    def __post_init__(self):
        if not 0 < self.shared_sample <= self.total_sample:
            raise ValueError("need 0 < shared_sample <= total_sample")

    def clamped(self, n_points: int) -> "DropoutConfig":
        """Shrink counts to fit a small frame, preserving the overlap ratio."""
        if self.total_sample <= n_points:
            return self
        ratio = self.shared_sample / self.total_sample
        total = n_points
        shared = max(1, int(round(total * ratio)))
        return DropoutConfig(total, shared)


@dataclass(frozen=True)
class CorrespondenceMap:
    """Pairs of point ids referring to the same original point in each view."""

    pairs: np.ndarray  # (P, 2) int64: (id_in_view1, id_in_view2)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", pairs)
        for side in (0, 1):
            col = pairs[:, side]
            if len(np.unique(col)) != len(col):
                raise ValueError("correspondence map is not a bijection")

    def __len__(self) -> int:
        return len(self.pairs)


def _rigid_matrix(params: AugmentParams) -> np.ndarray:
    theta = np.deg2rad(params.rotation_deg)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    flip = np.diag([-1.0 if params.flip_x else 1.0,
                    -1.0 if params.flip_y else 1.0,
                    1.0])
    return params.scale * flip @ rot


def apply_rigid_augment(pc: PointCloud, params: AugmentParams) -> PointCloud:
    """p -> scale * flip * R_z(theta) * p, ids unchanged."""
    mat = _rigid_matrix(params)
    return PointCloud(pc.points @ mat.T, pc.ids, pc.intensity)


def random_augment_params(rng: np.random.Generator) -> AugmentParams:
    """Draw one view's parameters from the standard augmentation ranges."""
    return AugmentParams(
        rotation_deg=float(rng.uniform(-180.0, 180.0)),
        scale=float(rng.uniform(0.8, 1.2)),
        flip_x=bool(rng.random() < 0.5),
        flip_y=bool(rng.random() < 0.5),
    )


def sample_views(pc: PointCloud, cfg: DropoutConfig,
                 p1: AugmentParams, p2: AugmentParams,
                 rng: np.random.Generator | None = None,
                 clamp: bool = True,
                 ) -> tuple[PointCloud, PointCloud, CorrespondenceMap]:
    """Draw two overlapping point subsets and augment each independently.

    A shared index set of `shared_sample` points is placed in both views;
    each view is topped up to `total_sample` with disjoint draws from the
    remaining points (without replacement). With `clamp` the counts shrink
    to fit small frames; without it a too-small frame is an error.
    """
    if clamp:
        cfg = cfg.clamped(len(pc))
    if len(pc) < cfg.shared_sample:
        raise ValueError(
            f"frame has {len(pc)} points, fewer than shared_sample={cfg.shared_sample}")
    if rng is None:
        rng = np.random.default_rng(p1.seed)

    n = len(pc)
    perm = rng.permutation(n)
    shared = perm[:cfg.shared_sample]
    rest = rng.permutation(perm[cfg.shared_sample:])
    extra = min(cfg.total_sample - cfg.shared_sample, len(rest))
    # disjoint top-up per view keeps the overlap ratio exact; small frames
    # that cannot supply 2*extra distinct points reuse view 1's pool
    take1 = rest[:extra]
    if len(rest) >= 2 * extra:
        take2 = rest[extra:2 * extra]
    else:
        shortfall = 2 * extra - len(rest)
        take2 = np.concatenate([rest[extra:], rest[:shortfall]])

    rows1 = np.sort(np.concatenate([shared, take1]))
    rows2 = np.sort(np.concatenate([shared, take2]))
    x1 = apply_rigid_augment(pc.subset(rows1), p1)
    x2 = apply_rigid_augment(pc.subset(rows2), p2)
    shared_ids = np.sort(pc.ids[shared])
    m = CorrespondenceMap(np.column_stack([shared_ids, shared_ids]))
    return x1, x2, m
