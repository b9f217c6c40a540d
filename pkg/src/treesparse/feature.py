"""Augmented parcel features and mapping of coefficients back to voxels."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage, sparse

from .cluster import ClusterTree
from .grid import GridMask
from .io import atomic_write_bytes, atomic_write_text, format_matrix_csv

__all__ = [
    "averaging_operator",
    "augment",
    "project_to_voxels",
    "scale_slice",
    "scale_contribution",
    "dominant_depth",
    "region_jaccard",
    "write_voxel_map",
]


def averaging_operator(tree: ClusterTree) -> sparse.csr_matrix:
    """Sparse (q, p) matrix whose row j averages the voxels of parcel j."""
    p, q = tree.n_leaves, tree.n_nodes
    is_leaf = tree.preorder < p
    rows, cols, vals = [], [], []
    for j in range(q):
        s = tree.pre_pos[j]
        sub = tree.preorder[s: s + 2 * tree.size[j] - 1]
        leaves = sub[is_leaf[s: s + len(sub)]]
        rows.append(np.full(len(leaves), j))
        cols.append(leaves)
        vals.append(np.full(len(leaves), 1.0 / tree.size[j]))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(q, p)
    )


def augment(X, tree: ClusterTree, op=None) -> np.ndarray:
    """Append one mean-signal column per parcel, in node creation order.

    ``op`` is an optional precomputed :func:`averaging_operator`.
    """
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    X2 = np.atleast_2d(X)
    if X2.shape[1] != tree.n_leaves:
        raise ValueError(f"X has {X2.shape[1]} columns but the tree has {tree.n_leaves} leaves")
    if op is None:
        op = averaging_operator(tree)
    out = np.asarray((op @ X2.T).T)
    out[:, : tree.n_leaves] = X2
    return out[0] if squeeze else out


def project_to_voxels(w, tree: ClusterTree, op=None) -> np.ndarray:
    """Voxel map ``m`` with ``m @ x == w @ augment(x)`` for every volume ``x``.

    ``w`` may be a length-q vector or a (q, c) matrix (one map per column).
    """
    w = np.asarray(w, dtype=float)
    if w.shape[0] != tree.n_nodes:
        raise ValueError(f"expected {tree.n_nodes} coefficients, got {w.shape[0]}")
    if op is None:
        op = averaging_operator(tree)
    return np.asarray(op.T @ w)


def scale_slice(w, tree: ClusterTree, d: int) -> np.ndarray:
    """Color each voxel by the coefficient of its ancestor at depth ``d``.

    Leaves shallower than ``d`` keep their own coefficient.
    """
    w = np.asarray(w, dtype=float)
    if w.shape[0] != tree.n_nodes:
        raise ValueError(f"expected {tree.n_nodes} coefficients, got {w.shape[0]}")
    if d < 0:
        raise ValueError("depth must be >= 0")
    return w[_ancestor_at(tree, d)]


def _ancestor_at(tree: ClusterTree, d: int) -> np.ndarray:
    node = np.arange(tree.n_leaves)
    while True:
        deep = tree.depth[node] > d
        if not deep.any():
            return node
        node[deep] = tree.parent[node[deep]]


def scale_contribution(w, tree: ClusterTree, d: int) -> np.ndarray:
    """Part of the voxel map contributed by the nodes at depth ``d``.

    Voxel k receives ``w_j / |P_j|`` for its ancestor ``j`` at depth ``d``,
    or 0 when its leaf is shallower than ``d``.  Summing over all depths
    gives :func:`project_to_voxels`.
    """
    w = np.asarray(w, dtype=float)
    if w.shape[0] != tree.n_nodes:
        raise ValueError(f"expected {tree.n_nodes} coefficients, got {w.shape[0]}")
    if d < 0:
        raise ValueError("depth must be >= 0")
    node = _ancestor_at(tree, d)
    out = w[node] / tree.size[node]
    out[tree.depth[node] != d] = 0.0
    return out


def dominant_depth(w, tree: ClusterTree, cells) -> int:
    """Depth whose nodes contribute the most weight magnitude to ``cells``.

    The score of depth d is the mean of ``|scale_contribution(w, tree, d)|``
    over the voxels in ``cells``; ties go to the shallower depth.
    """
    cells = np.asarray(cells, dtype=np.int64)
    scores = [np.abs(scale_contribution(w, tree, d)[cells]).mean()
              for d in range(tree.max_depth + 1)]
    return int(np.argmax(scores))


def region_jaccard(voxel_map, cells, shape, threshold: float = 0.1) -> float:
    """Overlap between a true region and the detected blobs that touch it.

    The map is thresholded at ``threshold`` times its largest magnitude and
    split into face-connected components on the grid ``shape``.  The
    detection for the region is the union of components that intersect it;
    the result is ``|detection & region| / |detection | region|``.
    """
    m = np.abs(np.asarray(voxel_map, dtype=float)).reshape(shape)
    region = np.zeros(m.shape, dtype=bool)
    region.flat[np.asarray(cells, dtype=np.int64)] = True
    top = m.max() if m.size else 0.0
    if top == 0 or not region.any():
        return 0.0
    labels, _ = ndimage.label(m >= threshold * top)
    hit = np.unique(labels[region])
    detected = np.isin(labels, hit[hit > 0])
    return float((detected & region).sum() / (detected | region).sum())


def _grid_2d(mask: GridMask, values) -> np.ndarray:
    vol = mask.to_volume(np.asarray(values, dtype=float))
    nx, ny, nz = vol.shape
    # z-slices tiled left to right
    return vol.transpose(0, 2, 1).reshape(nx, nz * ny) if nz > 1 else vol[:, :, 0]


def write_voxel_map(path, values, mask: GridMask) -> list[Path]:
    """Write ``<path>.csv``, ``<path>.pgm`` and the ``<path>.scale.txt`` sidecar.

    The PGM maps [min, max] over included voxels linearly onto 0..255.
    """
    path = Path(path)
    img = _grid_2d(mask, values)
    vals = np.asarray(values, dtype=float)
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 0.0)
    span = hi - lo
    scaled = np.zeros(img.shape) if span == 0 else (img - lo) / span * 255.0
    inc = _grid_2d(mask, np.ones(mask.n_voxels)) > 0
    pix = np.where(inc, np.clip(np.rint(scaled), 0, 255), 0).astype(np.uint8)
    h, wdt = pix.shape
    csv_path, pgm_path, scale_path = (path.with_name(path.name + ext)
                                      for ext in (".csv", ".pgm", ".scale.txt"))
    atomic_write_text(csv_path, format_matrix_csv(img))
    atomic_write_bytes(pgm_path, f"P5\n{wdt} {h}\n255\n".encode() + pix.tobytes())
    atomic_write_text(scale_path, f"min {'%.17g' % lo}\nmax {'%.17g' % hi}\n")
    return [csv_path, pgm_path, scale_path]
