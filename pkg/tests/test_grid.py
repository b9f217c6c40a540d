import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treesparse.grid import (
    GridMask,
    adjacency,
    format_mask,
    n_components,
    neighbors,
    parse_dims,
    read_mask,
    write_mask,
)


def brute_neighbors(mask, v):
    """All included cells at Manhattan distance 1, by scanning every cell."""
    c = np.array(mask.to_coord(v))
    return {
        u for u in range(mask.n_voxels)
        if np.abs(np.array(mask.to_coord(u)) - c).sum() == 1
    }


class TestGridMask:
    def test_ids_are_row_major_over_included_cells(self):
        inc = np.array([[1, 0, 1], [1, 1, 0]], dtype=bool)
        mask = GridMask(inc)
        assert mask.dims == (2, 3, 1)
        assert mask.n_voxels == 4
        assert [mask.to_coord(v) for v in range(4)] == [(0, 0, 0), (0, 2, 0), (1, 0, 0), (1, 1, 0)]

    def test_bijection(self, rng):
        inc = rng.random((4, 3, 2)) < 0.6
        inc[0, 0, 0] = True
        mask = GridMask(inc)
        assert mask.n_voxels == inc.sum()
        for coord in zip(*np.nonzero(inc)):
            assert mask.to_coord(mask.to_id(coord)) == tuple(int(c) for c in coord)

    def test_excluded_and_out_of_range(self):
        mask = GridMask(np.array([[True, False]]))
        with pytest.raises(KeyError):
            mask.to_id((0, 1))
        with pytest.raises(IndexError):
            mask.to_id((3, 0))
        with pytest.raises(IndexError):
            mask.to_coord(1)

    def test_to_volume_scatters_values(self):
        mask = GridMask(np.array([[True, False], [True, True]]))
        vol = mask.to_volume(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(vol[:, :, 0], [[1, 0], [2, 3]])


class TestNeighbors:
    def test_center_of_3x3(self):
        mask = GridMask.full((3, 3))
        center = mask.to_id((1, 1))
        expected = {mask.to_id(c) for c in [(0, 1), (2, 1), (1, 0), (1, 2)]}
        assert neighbors(mask, center) == expected

    def test_single_cell(self):
        assert neighbors(GridMask.full((1, 1)), 0) == set()

    def test_center_of_3x3x3_matches_scan(self):
        mask = GridMask.full((3, 3, 3))
        center = mask.to_id((1, 1, 1))
        got = neighbors(mask, center)
        assert len(got) == 6
        assert got == brute_neighbors(mask, center)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            neighbors(GridMask.full((2, 2)), 4)

    @pytest.mark.parametrize("shape", [(1, 1, 1), (2, 3, 1), (3, 3, 3), (5, 5, 5), (5, 4, 2)])
    def test_symmetry_exhaustive(self, shape):
        mask = GridMask.full(shape)
        nb = [neighbors(mask, v) for v in range(mask.n_voxels)]
        for u, v in itertools.product(range(mask.n_voxels), repeat=2):
            assert (u in nb[v]) == (v in nb[u])
            assert u not in nb[u]


class TestAdjacency:
    def test_two_cells(self):
        A = adjacency(GridMask.full((2, 1)))
        assert A.nnz == 2
        assert A[0, 1] == 1 and A[1, 0] == 1

    def test_40x40_edge_count(self):
        mask = GridMask.full((40, 40))
        A = adjacency(mask)
        # enumerate horizontal and vertical pairs directly
        expected = sum(1 for x in range(40) for y in range(39)) * 2
        assert expected == 3120
        assert A.nnz // 2 == expected
        assert n_components(A) == 1

    def test_single_included_cell(self):
        mask = GridMask(np.array([[False, True], [False, False]]))
        assert adjacency(mask).nnz == 0

    def test_no_self_edges_and_symmetric(self, rng):
        inc = rng.random((5, 4, 3)) < 0.7
        mask = GridMask(inc)
        A = adjacency(mask).toarray()
        assert np.all(np.diag(A) == 0)
        np.testing.assert_array_equal(A, A.T)
        for v in range(mask.n_voxels):
            assert set(np.flatnonzero(A[v])) == neighbors(mask, v)

    @settings(max_examples=30, deadline=None)
    @given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)))
    def test_full_grid_connected(self, shape):
        assert n_components(adjacency(GridMask.full(shape))) == 1


class TestMaskFiles:
    def test_round_trip(self, tmp_path, rng):
        inc = rng.random((3, 4, 2)) < 0.5
        inc[0, 0, 0] = True
        mask = GridMask(inc)
        path = tmp_path / "mask.txt"
        write_mask(mask, path)
        back = read_mask(path)
        np.testing.assert_array_equal(back.included, mask.included)
        assert format_mask(back) == path.read_text()

    def test_bad_cell_value(self, tmp_path):
        path = tmp_path / "mask.txt"
        path.write_text("dims 1 2 1\n1 2\n")
        with pytest.raises(ValueError, match="0 or 1"):
            read_mask(path)

    def test_parse_dims(self):
        assert parse_dims("40,40") == (40, 40, 1)
        assert parse_dims("2,3,4") == (2, 3, 4)
        with pytest.raises(ValueError):
            parse_dims("0,3")
