import struct
from itertools import combinations

import numpy as np
import pytest

from proposal_ssl.pointcloud import (DataError, EmptyResultError, FormatError,
                                     GroundFilterConfig, PointCloud,
                                     load_point_cloud, remove_ground,
                                     save_point_cloud)


def write_bin(path, records):
    path.write_bytes(b"".join(struct.pack("<4f", *r) for r in records))


class TestLoad:
    def test_two_records(self, tmp_path):
        p = tmp_path / "f.bin"
        write_bin(p, [(1, 2, 3, 0.5), (4, 5, 6, 0.9)])
        pc = load_point_cloud(p)
        assert len(pc) == 2
        assert pc.ids.tolist() == [0, 1]
        np.testing.assert_allclose(pc.points[0], [1, 2, 3])
        np.testing.assert_allclose(pc.intensity, [0.5, 0.9], atol=1e-7)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "f.bin"
        p.write_bytes(b"")
        assert len(load_point_cloud(p)) == 0

    def test_bad_length(self, tmp_path):
        p = tmp_path / "f.bin"
        p.write_bytes(b"\x00" * 33)
        with pytest.raises(FormatError):
            load_point_cloud(p)

    def test_nan_names_record(self, tmp_path):
        p = tmp_path / "f.bin"
        write_bin(p, [(1, 2, 3, 0.5), (float("nan"), 0, 0, 0)])
        with pytest.raises(DataError, match="record 1"):
            load_point_cloud(p)

    def test_roundtrip_bytes(self, tmp_path):
        src = tmp_path / "a.bin"
        write_bin(src, [(1.5, -2.25, 3.125, 0.5), (0.1, 0.2, 0.3, 1.0)])
        pc = load_point_cloud(src)
        dst = tmp_path / "b.bin"
        save_point_cloud(pc, dst)
        assert src.read_bytes() == dst.read_bytes()

    def test_csv_roundtrip(self, tmp_path):
        pc = PointCloud(np.array([[1.0, 2, 3], [4, 5, 6]]), [0, 1], [0.5, 0.25])
        p = tmp_path / "f.csv"
        save_point_cloud(pc, p, fmt="csv")
        back = load_point_cloud(p, fmt="csv")
        np.testing.assert_allclose(back.points, pc.points)

    def test_csv_missing_header(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("1,2,3,4\n")
        with pytest.raises(FormatError):
            load_point_cloud(p, fmt="csv")


class TestPointCloudInvariants:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(DataError):
            PointCloud(np.zeros((2, 3)), [1, 1])

    def test_negative_ids_rejected(self):
        with pytest.raises(DataError):
            PointCloud(np.zeros((2, 3)), [0, -1])

    def test_nonfinite_rejected(self):
        with pytest.raises(DataError):
            PointCloud(np.array([[0.0, 0, np.inf]]), [0])


class TestRemoveGround:
    def test_z_threshold(self):
        pc = PointCloud(np.array([[0, 0, -1.5], [0, 0, 0.0], [0, 0, 1.0]]), [0, 1, 2])
        out = remove_ground(pc, GroundFilterConfig("z_threshold", z_cut=-1.4))
        assert out.points[:, 2].tolist() == [0.0, 1.0]
        assert out.ids.tolist() == [1, 2]

    def test_z_cut_below_min_is_identity(self):
        pc = PointCloud(np.array([[0, 0, 0.5], [1, 1, 2.0]]), [0, 1])
        out = remove_ground(pc, GroundFilterConfig("z_threshold", z_cut=-10))
        assert len(out) == len(pc)

    def test_all_removed(self):
        pc = PointCloud(np.array([[0, 0, -1.0]]), [0])
        with pytest.raises(EmptyResultError):
            remove_ground(pc, GroundFilterConfig("z_threshold", z_cut=0.0))

    def test_ransac_plane(self):
        rng = np.random.default_rng(0)
        plane = np.column_stack([rng.uniform(-5, 5, (100, 2)), np.zeros(100)])
        elevated = np.column_stack([rng.uniform(-5, 5, (10, 2)), np.full(10, 2.0)])
        pc = PointCloud(np.vstack([plane, elevated]), np.arange(110))
        out = remove_ground(pc, GroundFilterConfig(
            "plane_ransac", ransac_iters=200, ransac_inlier_dist=0.05))
        assert sorted(out.ids.tolist()) == list(range(100, 110))

    def test_ransac_matches_exhaustive_oracle(self):
        # oracle: best plane over all 3-point subsets by inlier count
        rng = np.random.default_rng(3)
        plane = np.column_stack([rng.uniform(-2, 2, (18, 2))])
        plane = np.column_stack([plane, 0.01 * rng.standard_normal(18)])
        off = rng.uniform(-2, 2, (6, 3)) + np.array([0, 0, 3.0])
        pts = np.vstack([plane, off])
        inlier_dist = 0.05

        best = None
        for i, j, k in combinations(range(len(pts)), 3):
            a, b, c = pts[i], pts[j], pts[k]
            n = np.cross(b - a, c - a)
            if np.linalg.norm(n) < 1e-12:
                continue
            n = n / np.linalg.norm(n)
            mask = np.abs((pts - a) @ n) <= inlier_dist
            if best is None or mask.sum() > best.sum():
                best = mask
        oracle_kept = set(np.flatnonzero(~best).tolist())

        pc = PointCloud(pts, np.arange(len(pts)))
        out = remove_ground(pc, GroundFilterConfig(
            "plane_ransac", ransac_iters=500, ransac_inlier_dist=inlier_dist))
        assert set(out.ids.tolist()) == oracle_kept

    def test_subset_preserves_order(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 3, (50, 3))
        pc = PointCloud(pts, np.arange(50))
        out = remove_ground(pc, GroundFilterConfig("z_threshold", z_cut=0.5))
        assert set(out.ids) <= set(pc.ids)
        assert np.all(np.diff(out.ids) > 0)
