"""Shared fixtures and small builders for the test suite."""

import numpy as np
import pytest

from treesparse.cluster import ClusterTree, ward_cluster
from treesparse.grid import GridMask, adjacency


def random_tree(rng, p_max=10):
    """Random binary tree over ``p`` leaves, merging random live pairs."""
    p = int(rng.integers(1, p_max + 1))
    q = 2 * p - 1
    children = np.full((q, 2), -1, dtype=np.int64)
    live = list(range(p))
    for k in range(p, q):
        i, j = rng.choice(len(live), size=2, replace=False)
        a, b = live[i], live[j]
        children[k] = (a, b)
        live = [x for x in live if x not in (a, b)] + [k]
    return ClusterTree(p, children, np.zeros(q))


def zero_set_is_rooted(tree, v):
    """Every zero coordinate has only zero descendants."""
    for j in np.flatnonzero(v == 0):
        if np.any(v[tree.subtree(j)] != 0):
            return False
    return True


def grid_tree(shape, n=5, seed=0):
    """Ward tree of random data on a full grid; returns ``(X, mask, tree)``."""
    mask = GridMask.full(shape)
    X = np.random.default_rng(seed).standard_normal((n, mask.n_voxels))
    return X, mask, ward_cluster(X, adjacency(mask))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def fig1_tree():
    """Three voxels; voxels 0 and 1 form a parcel, which then joins voxel 2."""
    children = np.array([[-1, -1], [-1, -1], [-1, -1], [0, 1], [3, 2]])
    return ClusterTree(3, children, np.zeros(5))


@pytest.fixture
def balanced4():
    """Balanced tree over four leaves: {0,1} and {2,3} under the root."""
    children = np.array([[-1, -1]] * 4 + [[0, 1], [2, 3], [4, 5]])
    return ClusterTree(4, children, np.zeros(7))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
