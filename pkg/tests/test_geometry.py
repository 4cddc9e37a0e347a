import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcdnf.geometry import (PointCloud, PatchFrame, denormalize, estimate_normals_pca,
                            extract_patch, knn_indices, normalize)


def brute_knn(points, queries, k):
    out = []
    for q in queries:
        d = [(float(np.sum((p - q) ** 2)), i) for i, p in enumerate(points)]
        d.sort()
        out.append([i for _, i in d[:k]])
    return np.array(out)


class TestKnn:
    def test_small_example(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], float)
        assert knn_indices(pts, [[0.9, 0, 0]], 2).tolist() == [[1, 0]]

    def test_query_on_data_point_comes_first(self):
        pts = np.random.default_rng(3).normal(size=(20, 3))
        assert knn_indices(pts, pts[5:6], 1).tolist() == [[5]]

    def test_k_larger_than_n(self):
        with pytest.raises(ValueError):
            knn_indices(np.zeros((3, 3)), np.zeros((1, 3)), 4)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_sort(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(size=(64, 3))
        q = rng.uniform(size=(10, 3))
        np.testing.assert_array_equal(knn_indices(pts, q, 8), brute_knn(pts, q, 8))

    def test_ties_by_index_on_lattice(self):
        g = np.arange(4.0)
        pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        q = pts[[0, 21, 42]]
        np.testing.assert_array_equal(knn_indices(pts, q, 7), brute_knn(pts, q, 7))

    def test_tree_path_handles_ties(self):
        g = np.arange(8.0)
        pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        rng = np.random.default_rng(1)
        q = np.vstack([pts[rng.choice(len(pts), 5)], rng.uniform(0, 7, (5, 3))])
        np.testing.assert_array_equal(knn_indices(pts, q, 10), brute_knn(pts, q, 10))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(8, 256), st.integers(1, 8), st.integers(0, 2**31))
    def test_agrees_with_oracle(self, n, k, seed):
        rng = np.random.default_rng(seed)
        pts = np.round(rng.uniform(size=(n, 3)) * 8) / 8  # coarse grid forces ties
        q = pts[rng.choice(n, 3)]
        np.testing.assert_array_equal(knn_indices(pts, q, k), brute_knn(pts, q, k))


class TestPcaNormals:
    def test_plane(self):
        rng = np.random.default_rng(0)
        pts = np.c_[rng.uniform(size=(100, 2)), np.zeros(100)]
        normals, degenerate = estimate_normals_pca(PointCloud(pts), k=10)
        assert np.all(np.abs(normals[:, 2]) >= 1 - 1e-9)
        assert not degenerate.any()

    def test_sphere_angular_error(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(2000, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        normals, _ = estimate_normals_pca(PointCloud(v), k=16)
        ang = np.degrees(np.arccos(np.clip(np.abs(np.sum(normals * v, 1)), 0, 1)))
        assert np.mean(ang <= 5.0) >= 0.95

    def test_convex_orientation_points_outward(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(500, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        normals, _ = estimate_normals_pca(PointCloud(v), k=16)
        assert np.all(np.sum(normals * v, 1) > 0)

    def test_collinear_flagged(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
        normals, degenerate = estimate_normals_pca(PointCloud(pts), k=3)
        assert degenerate.all()
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0)

    def test_identical_points(self):
        normals, degenerate = estimate_normals_pca(PointCloud(np.ones((4, 3))), k=3)
        assert degenerate.all()
        np.testing.assert_array_equal(normals, np.tile([0.0, 0.0, 1.0], (4, 1)))

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            estimate_normals_pca(PointCloud(np.zeros((5, 3))), k=2)


def _with_normals(pts):
    n = np.zeros_like(pts)
    n[:, 2] = 1.0
    return PointCloud(pts, n)


class TestExtractPatch:
    def test_single_point_cloud(self):
        patch = extract_patch(_with_normals(np.array([[1.0, 2.0, 3.0]])), 0, r=0.5, M=512)
        assert patch.points.shape == (512, 3)
        assert patch.pad_count == 511
        np.testing.assert_array_equal(patch.points, 0.0)
        np.testing.assert_array_equal(patch.normals, np.tile([0, 0, 1.0], (512, 1)))

    def test_subsample_keeps_center(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.1, 0.1, (600, 3))
        patch = extract_patch(_with_normals(pts), 17, r=10.0, M=512, seed=3)
        assert patch.points.shape == (512, 3) and patch.pad_count == 0
        assert patch.source_indices[0] == 17
        assert len(np.unique(patch.source_indices)) == 512
        np.testing.assert_array_equal(patch.points[0], 0.0)

    def test_padding_rows(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(size=(300, 3))
        normals = rng.normal(size=(300, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        patch = extract_patch(PointCloud(pts, normals), 5, r=0.3, M=512)
        real = patch.real_count
        assert np.all(np.linalg.norm(patch.points[:real], axis=1) <= 1.0)
        np.testing.assert_array_equal(patch.points[real:], 0.0)
        np.testing.assert_array_equal(patch.normals[real:], np.tile(normals[5], (512 - real, 1)))

    def test_mean_count_matches_radius_count(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(size=(3000, 3))
        cloud = _with_normals(pts)
        r = 0.05 * cloud.diag
        centers = rng.choice(3000, 200, replace=False)
        counts = [extract_patch(cloud, c, r).real_count for c in centers]
        direct = [int(np.sum(np.linalg.norm(pts - pts[c], axis=1) < r)) for c in centers]
        assert np.mean(counts) == np.mean(direct)

    def test_translation_leaves_local_points_unchanged(self):
        rng = np.random.default_rng(4)
        pts = np.round(rng.uniform(-1, 1, (800, 3)) * 1024) / 1024  # dyadic: exact shifts
        cloud = _with_normals(pts)
        shifted = cloud.translated([3.0, -5.0, 8.0])
        for c in (0, 10, 400):
            a = extract_patch(cloud, c, 0.25, M=64, seed=9)
            b = extract_patch(shifted, c, 0.25, M=64, seed=9)
            np.testing.assert_array_equal(a.points, b.points)
            np.testing.assert_array_equal(a.source_indices, b.source_indices)

    def test_requires_normals(self):
        with pytest.raises(ValueError):
            extract_patch(PointCloud(np.zeros((3, 3))), 0, 1.0)


class TestFrame:
    def test_origin_maps_to_center(self):
        frame = PatchFrame(np.array([5.0, 5.0, 5.0]), 2.0)
        np.testing.assert_array_equal(denormalize(frame, [0, 0, 0]), [5, 5, 5])
        np.testing.assert_array_equal(denormalize(frame, [1, 0, 0]), [7, 5, 5])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            frame = PatchFrame(rng.normal(size=3) * 10, float(rng.uniform(0.01, 3)))
            p = rng.normal(size=3) * 10
            worst = max(worst, np.max(np.abs(denormalize(frame, normalize(frame, p)) - p)))
        assert worst <= 1e-12


class TestPointCloud:
    def test_diag(self):
        c = PointCloud(np.array([[0, 0, 0], [1, 2, 2]], float))
        assert c.diag == 3.0

    def test_rejects_non_unit_normals(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((2, 3)), np.ones((2, 3)))
