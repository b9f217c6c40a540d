"""Spatially-constrained Ward agglomeration.

Nodes are numbered 0..q-1 with q = 2p - 1: leaves 0..p-1 are the voxels,
internal nodes p..q-1 are created in merge order, so the root is q - 1.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .grid import n_components
from .io import atomic_write_text

__all__ = [
    "ClusterTree",
    "DisconnectedGraphError",
    "ward_delta",
    "ward_cluster",
    "descendants",
    "node_depth",
    "read_tree",
    "write_tree",
    "format_tree",
]


class DisconnectedGraphError(ValueError):
    pass


def ward_delta(mean1, size1, mean2, size2) -> float:
    """Increase of within-cluster inertia caused by merging two clusters."""
    mean1 = np.asarray(mean1, dtype=float)
    mean2 = np.asarray(mean2, dtype=float)
    if mean1.shape != mean2.shape:
        raise ValueError(f"cluster means differ in length: {mean1.shape} vs {mean2.shape}")
    if size1 < 1 or size2 < 1:
        raise ValueError("cluster sizes must be >= 1")
    diff = mean1 - mean2
    return float(size1 * size2 / (size1 + size2) * np.dot(diff, diff))


@dataclass(frozen=True)
class ClusterTree:
    """Binary merge tree over ``n_leaves`` voxels.

    ``children[j]`` is ``(-1, -1)`` for leaves, ``parent[root] == -1``.
    """

    n_leaves: int
    children: np.ndarray
    delta: np.ndarray
    parent: np.ndarray = field(init=False, repr=False)
    size: np.ndarray = field(init=False, repr=False)
    depth: np.ndarray = field(init=False, repr=False)
    preorder: np.ndarray = field(init=False, repr=False)
    pre_pos: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = int(self.n_leaves)
        q = 2 * p - 1
        ch = np.asarray(self.children, dtype=np.int64).reshape(q, 2)
        delta = np.asarray(self.delta, dtype=float).reshape(q)
        if p < 1:
            raise ValueError("a tree needs at least one leaf")
        if np.any(ch[:p] != -1):
            raise ValueError("leaves 0..p-1 must have no children")
        parent = np.full(q, -1, dtype=np.int64)
        for j in range(p, q):
            a, b = ch[j]
            if not (0 <= a < j and 0 <= b < j) or a == b:
                raise ValueError(f"node {j} has invalid children ({a}, {b})")
            if parent[a] != -1 or parent[b] != -1:
                raise ValueError(f"node {j} reuses a child that already has a parent")
            parent[a] = parent[b] = j
        if np.count_nonzero(parent == -1) != 1:
            raise ValueError("tree must have a single root")
        size = np.ones(q, dtype=np.int64)
        for j in range(p, q):
            size[j] = size[ch[j, 0]] + size[ch[j, 1]]
        depth = np.zeros(q, dtype=np.int64)
        for j in range(q - 2, -1, -1):
            depth[j] = depth[parent[j]] + 1
        preorder = np.empty(q, dtype=np.int64)
        stack = [q - 1]
        k = 0
        while stack:
            j = stack.pop()
            preorder[k] = j
            k += 1
            if j >= p:
                stack.append(ch[j, 1])
                stack.append(ch[j, 0])
        pre_pos = np.empty(q, dtype=np.int64)
        pre_pos[preorder] = np.arange(q)
        for name, arr in [("children", ch), ("delta", delta), ("parent", parent),
                          ("size", size), ("depth", depth), ("preorder", preorder),
                          ("pre_pos", pre_pos)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_leaves - 1

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def is_leaf(self, j: int) -> bool:
        self._check(j)
        return j < self.n_leaves

    def subtree(self, j: int) -> np.ndarray:
        """Node ids of the subtree rooted at ``j`` in preorder (``j`` first)."""
        self._check(j)
        s = self.pre_pos[j]
        return self.preorder[s: s + 2 * self.size[j] - 1]

    def members(self, j: int) -> np.ndarray:
        """Sorted voxel ids of the parcel at node ``j``."""
        sub = self.subtree(j)
        return np.sort(sub[sub < self.n_leaves])

    def ancestors(self, j: int) -> list[int]:
        """Ancestors of ``j`` including itself, from ``j`` up to the root."""
        self._check(j)
        out = [int(j)]
        while self.parent[out[-1]] != -1:
            out.append(int(self.parent[out[-1]]))
        return out

    def _check(self, j):
        if not 0 <= int(j) < self.n_nodes:
            raise IndexError(f"node id {j} out of range [0, {self.n_nodes})")


def descendants(tree: ClusterTree, j: int) -> np.ndarray:
    """The group rooted at ``j``: sorted ids of ``j`` and all its descendants."""
    return np.sort(tree.subtree(j))


def node_depth(tree: ClusterTree, j: int) -> int:
    tree._check(j)
    return int(tree.depth[j])


def ward_cluster(X, adj) -> ClusterTree:
    """Agglomerate the columns of ``X`` along the edges of ``adj``.

    At each step the adjacent pair with the smallest Ward cost is merged;
    equal costs go to the lexicographically smallest ``(id, id)`` pair.

    Parameters
    ----------
    X : ndarray, shape (n, p)
        One column per voxel.
    adj : sparse or dense (p, p) adjacency
        Must describe a connected graph.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2D, got shape {X.shape}")
    n, p = X.shape
    if p < 1:
        raise ValueError("X must have at least one column")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    adj = sparse.csr_matrix(adj)
    if adj.shape != (p, p):
        raise ValueError(f"adjacency shape {adj.shape} does not match p={p}")
    ncomp = n_components(adj)
    if ncomp != 1:
        raise DisconnectedGraphError(
            f"adjacency graph has {ncomp} connected components; constrained clustering needs one"
        )

    q = 2 * p - 1
    means = np.empty((q, n))
    means[:p] = X.T
    size = np.zeros(q, dtype=np.int64)
    size[:p] = 1
    children = np.full((q, 2), -1, dtype=np.int64)
    delta = np.zeros(q)
    alive = np.zeros(q, dtype=bool)
    alive[:p] = True

    coo = sparse.triu(adj, k=1).tocoo()
    nbrs = [set() for _ in range(q)]
    heap = []
    for a, b in zip(coo.row.tolist(), coo.col.tolist()):
        if a == b:
            continue
        a, b = min(a, b), max(a, b)
        if b in nbrs[a]:
            continue
        nbrs[a].add(b)
        nbrs[b].add(a)
        heap.append((ward_delta(means[a], 1, means[b], 1), a, b))
    heapq.heapify(heap)

    for k in range(p, q):
        while True:
            d, a, b = heapq.heappop(heap)
            if alive[a] and alive[b]:
                break
        sa, sb = size[a], size[b]
        means[k] = (sa * means[a] + sb * means[b]) / (sa + sb)
        size[k] = sa + sb
        children[k] = (a, b)
        delta[k] = d
        alive[a] = alive[b] = False
        alive[k] = True
        merged = (nbrs[a] | nbrs[b]) - {a, b}
        nbrs[a] = nbrs[b] = set()
        nbrs[k] = merged
        for u in sorted(merged):
            nbrs[u].discard(a)
            nbrs[u].discard(b)
            nbrs[u].add(k)
            heapq.heappush(heap, (ward_delta(means[u], size[u], means[k], size[k]), u, k))

    return ClusterTree(p, children, delta)


def format_tree(tree: ClusterTree) -> str:
    """One line per node: ``id leaf|internal child1 child2 depth size delta``.

    Ids in the file are 1-based; ``0`` marks a missing child.
    """
    lines = []
    for j in range(tree.n_nodes):
        a, b = tree.children[j]
        kind = "leaf" if j < tree.n_leaves else "internal"
        lines.append(
            f"{j + 1} {kind} {a + 1} {b + 1} {tree.depth[j]} {tree.size[j]} "
            f"{'%.17g' % tree.delta[j]}"
        )
    return "\n".join(lines) + "\n"


def write_tree(tree: ClusterTree, path) -> None:
    atomic_write_text(path, format_tree(tree))


def read_tree(path) -> ClusterTree:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7 or parts[1] not in ("leaf", "internal"):
            raise ValueError(f"{path}:{lineno}: malformed tree line {line!r}")
        try:
            rows.append((int(parts[0]), parts[1], int(parts[2]), int(parts[3]), float(parts[6])))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed tree line {line!r}") from None
    q = len(rows)
    if q % 2 == 0:
        raise ValueError(f"{path}: a binary tree has an odd node count, found {q}")
    p = (q + 1) // 2
    children = np.full((q, 2), -1, dtype=np.int64)
    delta = np.zeros(q)
    for i, (j, kind, a, b, d) in enumerate(rows):
        if j != i + 1:
            raise ValueError(f"{path}:{i + 1}: expected node id {i + 1}, found {j}")
        if (kind == "leaf") != (i < p):
            raise ValueError(f"{path}:{i + 1}: leaves must come first")
        children[i] = (a - 1, b - 1)
        delta[i] = d
    return ClusterTree(p, children, delta)
