"""Point cloud containers, file I/O, and ground removal."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PointCloud",
    "GroundFilterConfig",
    "FormatError",
    "DataError",
    "EmptyResultError",
    "load_point_cloud",
    "save_point_cloud",
    "remove_ground",
]

RECORD_SIZE = 16  # 4 little-endian float32: x, y, z, intensity


class FormatError(ValueError):
    """File bytes do not decode as the declared format."""


class DataError(ValueError):
    """Decoded values violate basic data invariants (NaN/Inf)."""


class EmptyResultError(RuntimeError):
    """An operation produced an empty cloud where a non-empty one is required."""


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points with stable integer identities.

    `ids` index into the originating frame, so subsets keep their
    original identities and two derived views can be matched up.
    """

    points: np.ndarray                      # (L, 3) float64
    ids: np.ndarray                         # (L,) int64
    intensity: np.ndarray | None = None     # (L,) float64 or None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "ids", ids)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            object.__setattr__(self, "intensity", inten)
            if len(inten) != len(points):
                raise DataError("intensity length does not match point count")
        if len(points) != len(ids):
            raise DataError("ids length does not match point count")
        if len(ids) and (ids < 0).any():
            raise DataError("negative point id")
        if len(np.unique(ids)) != len(ids):
            raise DataError("duplicate point ids")
        if not np.all(np.isfinite(points)):
            bad = int(np.argwhere(~np.isfinite(points).all(axis=1))[0, 0])
            raise DataError(f"non-finite coordinate at record {bad}")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_index) -> "PointCloud":
        """Row subset preserving ids (and order, for boolean masks)."""
        inten = self.intensity[mask_or_index] if self.intensity is not None else None
        return PointCloud(self.points[mask_or_index], self.ids[mask_or_index], inten)

    def id_to_row(self) -> dict[int, int]:
        return {int(pid): i for i, pid in enumerate(self.ids)}


@dataclass(frozen=True)
class GroundFilterConfig:
    mode: str = "z_threshold"           # z_threshold | plane_ransac
    z_cut: float = 0.15
    ransac_iters: int = 100
    ransac_inlier_dist: float = 0.05

    def __post_init__(self):
        if self.mode not in ("z_threshold", "plane_ransac"):
            raise ValueError(f"unknown ground filter mode: {self.mode!r}")
        if not np.isfinite(self.z_cut):
            raise ValueError("z_cut must be finite")
        if self.ransac_inlier_dist <= 0:
            raise ValueError("ransac_inlier_dist must be positive")
        if self.ransac_iters < 1:
            raise ValueError("ransac_iters must be at least 1")


def load_point_cloud(path, fmt: str = "xyzi_bin") -> PointCloud:
    """Load a cloud from a KITTI-style binary file or a CSV."""
    path = Path(path)
    if fmt == "xyzi_bin":
        raw = path.read_bytes()
        if len(raw) % RECORD_SIZE != 0:
            raise FormatError(
                f"{path}: {len(raw)} bytes is not a multiple of the "
                f"{RECORD_SIZE}-byte record size")
        arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    elif fmt == "csv":
        lines = path.read_text().splitlines()
        if not lines:
            arr = np.zeros((0, 4))
        else:
            if lines[0].strip() != "x,y,z,intensity":
                raise FormatError(f"{path}: missing 'x,y,z,intensity' header")
            rows = []
            for ln, line in enumerate(lines[1:], start=2):
                if not line.strip():
                    continue
                parts = line.split(",")
                if len(parts) != 4:
                    raise FormatError(f"{path}:{ln}: expected 4 fields, got {len(parts)}")
                rows.append([float(v) for v in parts])
            arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    else:
        raise ValueError(f"unknown format: {fmt!r}")

    if len(arr) and not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(arr).all(axis=1))[0, 0])
        raise DataError(f"{path}: non-finite value at record {bad}")
    return PointCloud(arr[:, :3], np.arange(len(arr)), arr[:, 3])


def save_point_cloud(pc: PointCloud, path, fmt: str = "xyzi_bin") -> None:
    """Write a cloud; intensity defaults to 0 when absent."""
    path = Path(path)
    inten = pc.intensity if pc.intensity is not None else np.zeros(len(pc))
    arr = np.column_stack([pc.points, inten]).astype("<f4")
    if fmt == "xyzi_bin":
        path.write_bytes(arr.tobytes())
    elif fmt == "csv":
        lines = ["x,y,z,intensity"]
        for x, y, z, i in arr:
            lines.append(f"{x},{y},{z},{i}")
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown format: {fmt!r}")


def _ransac_plane(points: np.ndarray, iters: int, inlier_dist: float,
                  seed: int = 0) -> np.ndarray:
    """Best-plane inlier mask via RANSAC over random 3-point subsets."""
    rng = np.random.default_rng(seed)
    n = len(points)
    best_mask = np.zeros(n, dtype=bool)
    for _ in range(iters):
        idx = rng.choice(n, size=3, replace=False)
        a, b, c = points[idx]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue  # degenerate (collinear) sample
        normal = normal / norm
        dist = np.abs((points - a) @ normal)
        mask = dist <= inlier_dist
        if mask.sum() > best_mask.sum():
            best_mask = mask
    return best_mask


def remove_ground(pc: PointCloud, cfg: GroundFilterConfig) -> PointCloud:
    """Drop ground points so proposal sampling concentrates on objects."""
    if len(pc) == 0:
        raise ValueError("remove_ground requires a non-empty cloud")
    if cfg.mode == "z_threshold":
        keep = pc.points[:, 2] > cfg.z_cut
    else:
        inliers = _ransac_plane(pc.points, cfg.ransac_iters, cfg.ransac_inlier_dist)
        keep = ~inliers
    if not keep.any():
        raise EmptyResultError("ground filter removed every point")
    return pc.subset(keep)
