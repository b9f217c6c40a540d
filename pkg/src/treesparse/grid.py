"""Voxel grid geometry, masks and axis-aligned adjacency.

Voxel ids are 0-based and assigned in row-major (C) order over the included
cells of an ``(nx, ny, nz)`` grid.  2D grids are 3D grids with ``nz == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .io import atomic_write_text

__all__ = [
    "GridMask",
    "neighbors",
    "adjacency",
    "n_components",
    "read_mask",
    "write_mask",
    "parse_dims",
]

_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass(frozen=True)
class GridMask:
    """Boolean mask over a 3D cell grid.

    Parameters
    ----------
    included : ndarray of bool, shape (nx, ny, nz)
        Cells that carry a voxel.  A 2D array is promoted to ``nz == 1``.
    """

    included: np.ndarray
    _ids: np.ndarray = field(init=False, repr=False, compare=False)
    _coords: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        inc = np.asarray(self.included, dtype=bool)
        if inc.ndim == 2:
            inc = inc[:, :, None]
        if inc.ndim != 3 or min(inc.shape) < 1:
            raise ValueError(f"mask must be a non-empty 2D or 3D array, got shape {inc.shape}")
        inc = inc.copy()
        inc.setflags(write=False)
        ids = np.full(inc.shape, -1, dtype=np.int64)
        coords = np.argwhere(inc)
        ids[tuple(coords.T)] = np.arange(len(coords))
        ids.setflags(write=False)
        coords.setflags(write=False)
        object.__setattr__(self, "included", inc)
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_coords", coords)

    @classmethod
    def full(cls, dims) -> "GridMask":
        dims = tuple(int(d) for d in dims)
        if len(dims) == 2:
            dims = dims + (1,)
        return cls(np.ones(dims, dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.included.shape)

    @property
    def n_voxels(self) -> int:
        return len(self._coords)

    def to_id(self, coord) -> int:
        coord = tuple(int(c) for c in coord)
        if len(coord) == 2:
            coord = coord + (0,)
        if any(c < 0 or c >= d for c, d in zip(coord, self.dims)):
            raise IndexError(f"cell {coord} outside grid {self.dims}")
        v = int(self._ids[coord])
        if v < 0:
            raise KeyError(f"cell {coord} is not included in the mask")
        return v

    def to_coord(self, v: int) -> tuple[int, int, int]:
        self._check_id(v)
        return tuple(int(c) for c in self._coords[v])

    def coords(self) -> np.ndarray:
        """(p, 3) array of cell coordinates indexed by voxel id."""
        return self._coords

    def to_volume(self, values, fill=0.0) -> np.ndarray:
        """Scatter a length-p voxel vector back into a dense grid."""
        values = np.asarray(values)
        if values.shape != (self.n_voxels,):
            raise ValueError(f"expected {self.n_voxels} voxel values, got shape {values.shape}")
        out = np.full(self.dims, fill, dtype=values.dtype if values.dtype.kind == "f" else float)
        out[tuple(self._coords.T)] = values
        return out

    def _check_id(self, v):
        if not 0 <= int(v) < self.n_voxels:
            raise IndexError(f"voxel id {v} out of range [0, {self.n_voxels})")


def neighbors(mask: GridMask, v: int) -> set[int]:
    """Included cells that share a face with voxel ``v``."""
    mask._check_id(v)
    x, y, z = mask._coords[v]
    out = set()
    for dx, dy, dz in _OFFSETS:
        c = (x + dx, y + dy, z + dz)
        if all(0 <= ci < d for ci, d in zip(c, mask.dims)):
            u = mask._ids[c]
            if u >= 0:
                out.add(int(u))
    return out


def adjacency(mask: GridMask) -> sparse.csr_matrix:
    """Symmetric 0/1 voxel adjacency (no self-edges) as a CSR matrix."""
    ids = mask._ids
    rows, cols = [], []
    for axis in range(3):
        if ids.shape[axis] < 2:
            continue
        lo = np.take(ids, np.arange(ids.shape[axis] - 1), axis=axis)
        hi = np.take(ids, np.arange(1, ids.shape[axis]), axis=axis)
        ok = (lo >= 0) & (hi >= 0)
        rows.append(lo[ok])
        cols.append(hi[ok])
    p = mask.n_voxels
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.zeros(0, dtype=np.int64)
    data = np.ones(2 * len(r), dtype=np.int8)
    A = sparse.coo_matrix((data, (np.r_[r, c], np.r_[c, r])), shape=(p, p))
    return A.tocsr()


def n_components(adj) -> int:
    return int(connected_components(sparse.csr_matrix(adj), directed=False)[0])


def parse_dims(text: str) -> tuple[int, int, int]:
    parts = [int(t) for t in text.replace("x", ",").split(",") if t.strip()]
    if len(parts) not in (2, 3) or min(parts) < 1:
        raise ValueError(f"dims must be 'nx,ny[,nz]' with positive entries, got {text!r}")
    if len(parts) == 2:
        parts.append(1)
    return tuple(parts)


def read_mask(path) -> GridMask:
    """Read ``dims nx ny nz`` followed by a row-major 0/1 grid."""
    tokens = Path(path).read_text().split()
    if len(tokens) < 4 or tokens[0] != "dims":
        raise ValueError(f"{path}: mask file must start with 'dims nx ny nz'")
    dims = tuple(int(t) for t in tokens[1:4])
    cells = tokens[4:]
    expected = dims[0] * dims[1] * dims[2]
    if len(cells) != expected:
        raise ValueError(f"{path}: expected {expected} cells for dims {dims}, found {len(cells)}")
    bad = [t for t in cells if t not in ("0", "1")]
    if bad:
        raise ValueError(f"{path}: mask cells must be 0 or 1, found {bad[0]!r}")
    return GridMask(np.array([t == "1" for t in cells]).reshape(dims))


def format_mask(mask: GridMask) -> str:
    nx, ny, nz = mask.dims
    lines = [f"dims {nx} {ny} {nz}"]
    flat = mask.included.reshape(nx * ny, nz).astype(int)
    for row in flat.reshape(nx, ny * nz):
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def write_mask(mask: GridMask, path) -> None:
    atomic_write_text(path, format_mask(mask))
