import numpy as np
import pytest

from treesparse.cluster import ClusterTree
from treesparse.feature import (
    augment,
    dominant_depth,
    project_to_voxels,
    region_jaccard,
    scale_contribution,
    scale_slice,
    write_voxel_map,
)
from treesparse.grid import GridMask

from conftest import grid_tree, random_tree


class TestAugment:
    def test_single_voxel_is_identity(self, rng):
        X = rng.standard_normal((4, 1))
        tree = ClusterTree(1, np.full((1, 2), -1), np.zeros(1))
        np.testing.assert_array_equal(augment(X, tree), X)

    def test_parcel_column_is_mean(self, fig1_tree, rng):
        X = rng.standard_normal((6, 3))
        Xt = augment(X, fig1_tree)
        np.testing.assert_allclose(Xt[:, 3], (X[:, 0] + X[:, 1]) / 2)
        np.testing.assert_allclose(Xt[:, 4], X.mean(axis=1))

    def test_columns_are_member_means(self, rng):
        for _ in range(20):
            tree = random_tree(rng, 10)
            X = rng.standard_normal((5, tree.n_leaves))
            Xt = augment(X, tree)
            assert Xt.shape == (5, 2 * tree.n_leaves - 1)
            for j in range(tree.n_nodes):
                np.testing.assert_allclose(Xt[:, j], X[:, tree.members(j)].mean(axis=1), atol=1e-12)

    def test_internal_column_is_weighted_child_mean(self):
        X, _, tree = grid_tree((4, 4), n=3)
        Xt = augment(X, tree)
        for j in range(tree.n_leaves, tree.n_nodes):
            a, b = tree.children[j]
            mix = (tree.size[a] * Xt[:, a] + tree.size[b] * Xt[:, b]) / tree.size[j]
            np.testing.assert_allclose(Xt[:, j], mix, atol=1e-12)

    def test_width_mismatch(self, fig1_tree):
        with pytest.raises(ValueError):
            augment(np.zeros((2, 4)), fig1_tree)


class TestProjection:
    def test_root_only(self, fig1_tree):
        w = np.zeros(5)
        w[4] = 3.0
        np.testing.assert_allclose(project_to_voxels(w, fig1_tree), [1.0, 1.0, 1.0])

    def test_leaf_only(self, fig1_tree):
        w = np.zeros(5)
        w[2] = -2.0
        np.testing.assert_array_equal(project_to_voxels(w, fig1_tree), [0, 0, -2])

    def test_ancestor_sum_formula(self, fig1_tree):
        w = np.array([1.0, 2.0, 3.0, 4.0, 6.0])
        # voxel k gets sum over ancestors j of w_j / |P_j|
        expected = [1 + 4 / 2 + 6 / 3, 2 + 4 / 2 + 6 / 3, 3 + 6 / 3]
        np.testing.assert_allclose(project_to_voxels(w, fig1_tree), expected)

    def test_dual_of_augment(self, rng):
        X, _, tree = grid_tree((5, 1), n=2)
        for _ in range(10):
            w = rng.standard_normal(tree.n_nodes)
            x = rng.standard_normal(tree.n_leaves)
            m = project_to_voxels(w, tree)
            assert m @ x == pytest.approx(w @ augment(x, tree), abs=1e-12)

    def test_linearity_and_matrix_input(self, rng):
        tree = random_tree(rng, 8)
        U = rng.standard_normal((tree.n_nodes, 3))
        M = project_to_voxels(U, tree)
        for k in range(3):
            np.testing.assert_allclose(M[:, k], project_to_voxels(U[:, k], tree), atol=1e-12)
        combo = project_to_voxels(2 * U[:, 0] - 0.5 * U[:, 1], tree)
        np.testing.assert_allclose(combo, 2 * M[:, 0] - 0.5 * M[:, 1], atol=1e-12)

    def test_length_mismatch(self, fig1_tree):
        with pytest.raises(ValueError):
            project_to_voxels(np.zeros(4), fig1_tree)


class TestScaleSlice:
    def test_depth_zero_is_root(self, fig1_tree):
        w = np.arange(5, dtype=float)
        np.testing.assert_array_equal(scale_slice(w, fig1_tree, 0), [4, 4, 4])

    def test_deep_slice_gives_leaves(self, balanced4):
        w = np.arange(7, dtype=float)
        np.testing.assert_array_equal(scale_slice(w, balanced4, 2), [0, 1, 2, 3])
        np.testing.assert_array_equal(scale_slice(w, balanced4, 9), [0, 1, 2, 3])

    def test_balanced_halves(self, balanced4):
        w = np.arange(7, dtype=float)
        np.testing.assert_array_equal(scale_slice(w, balanced4, 1), [4, 4, 5, 5])

    def test_shallow_leaf_keeps_own_coefficient(self, fig1_tree):
        w = np.arange(5, dtype=float)
        np.testing.assert_array_equal(scale_slice(w, fig1_tree, 2), [0, 1, 2])


class TestScaleContribution:
    def test_sums_to_projection(self, rng):
        for _ in range(20):
            tree = random_tree(rng, 10)
            w = rng.standard_normal(tree.n_nodes)
            total = sum(scale_contribution(w, tree, d) for d in range(tree.max_depth + 1))
            np.testing.assert_allclose(total, project_to_voxels(w, tree), atol=1e-12)

    def test_shallow_leaf_contributes_nothing_deeper(self, fig1_tree):
        w = np.ones(5)
        np.testing.assert_allclose(scale_contribution(w, fig1_tree, 2), [1, 1, 0])
        np.testing.assert_allclose(scale_contribution(w, fig1_tree, 1), [0.5, 0.5, 1])

    def test_dominant_depth(self, balanced4):
        w = np.zeros(7)
        w[4] = 10.0  # parcel {0, 1} at depth 1
        w[2] = 1.0  # leaf 2 at depth 2
        assert dominant_depth(w, balanced4, [0, 1]) == 1
        assert dominant_depth(w, balanced4, [2]) == 2


class TestRegionJaccard:
    def test_exact_detection(self):
        m = np.zeros(25)
        cells = [6, 7, 11, 12]
        m[cells] = 1.0
        assert region_jaccard(m, cells, (5, 5)) == 1.0

    def test_blob_larger_than_region(self):
        m = np.zeros((5, 5))
        m[1:4, 1:4] = 1.0
        assert region_jaccard(m.ravel(), [12], (5, 5)) == pytest.approx(1 / 9)

    def test_distant_blob_is_ignored(self):
        m = np.zeros((5, 5))
        m[0, 0] = 1.0
        m[4, 4] = 0.5
        assert region_jaccard(m.ravel(), [24], (5, 5)) == 1.0
        assert region_jaccard(m.ravel(), [12], (5, 5)) == 0.0

    def test_zero_map(self):
        assert region_jaccard(np.zeros(4), [0], (2, 2)) == 0.0


class TestVoxelMapExport:
    def test_files_and_scaling(self, tmp_path):
        mask = GridMask.full((2, 3))
        vals = np.array([0.0, 1.0, 2.0, 3.0, 4.0, -1.0])
        paths = write_voxel_map(tmp_path / "m", vals, mask)
        assert [p.name for p in paths] == ["m.csv", "m.pgm", "m.scale.txt"]
        data = paths[1].read_bytes()
        assert data.startswith(b"P5\n3 2\n255\n")
        pix = np.frombuffer(data[len(b"P5\n3 2\n255\n"):], dtype=np.uint8)
        np.testing.assert_array_equal(pix, np.rint((vals + 1) / 5 * 255))
        assert paths[2].read_text() == "min -1\nmax 4\n"
        grid = np.loadtxt(paths[0], delimiter=",")
        np.testing.assert_array_equal(grid, vals.reshape(2, 3))
