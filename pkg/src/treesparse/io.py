"""File formats shared by the command line tools.

Matrices are stored either as headerless CSV with 17 significant digits
(lossless for float64) or in a small binary container::

    b"TSP1" | u64 rows | u64 cols | rows*cols float64, row-major, little-endian
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"TSP1"

__all__ = [
    "MatrixFormatError",
    "atomic_write_bytes",
    "atomic_write_text",
    "format_matrix_csv",
    "read_matrix",
    "write_matrix",
    "read_vector",
    "file_digest",
    "rng_stream",
    "dump_json",
]


class MatrixFormatError(ValueError):
    """Malformed matrix file; the message carries line/column."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(v: float) -> str:
    return "%.17g" % v


def format_matrix_csv(M) -> str:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError(f"expected a 1D or 2D array, got {M.ndim}D")
    return "".join(",".join(_fmt(v) for v in row) + "\n" for row in M)


def write_matrix(path, M, binary: bool | None = None) -> None:
    """Write ``M`` as CSV, or binary when ``binary`` or the suffix is ``.tsp``."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".tsp"
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if binary:
        head = MAGIC + struct.pack("<QQ", *M.shape)
        atomic_write_bytes(path, head + np.ascontiguousarray(M, dtype="<f8").tobytes())
    else:
        atomic_write_text(path, format_matrix_csv(M))


def _parse_csv(text: str, name) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise MatrixFormatError(
                f"{name}:{lineno}: expected {width} columns, found {len(cells)}"
            )
        row = []
        for col, cell in enumerate(cells, start=1):
            try:
                row.append(float(cell))
            except ValueError:
                raise MatrixFormatError(
                    f"{name}:{lineno}:{col}: cannot parse {cell.strip()!r} as a number"
                ) from None
        rows.append(row)
    if not rows:
        raise MatrixFormatError(f"{name}: empty matrix file")
    return np.array(rows, dtype=float)


def read_matrix(path) -> np.ndarray:
    """Read a CSV or ``TSP1`` matrix; always returns a 2D float array."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == MAGIC:
        if len(data) < 20:
            raise MatrixFormatError(f"{path}: truncated header")
        r, c = struct.unpack("<QQ", data[4:20])
        body = data[20:]
        if len(body) != 8 * r * c:
            raise MatrixFormatError(f"{path}: expected {r}x{c} values, found {len(body) // 8}")
        return np.frombuffer(body, dtype="<f8").reshape(r, c).astype(float)
    return _parse_csv(data.decode("utf-8"), path)


def read_vector(path) -> np.ndarray:
    M = read_matrix(path)
    if M.shape[1] != 1 and M.shape[0] != 1:
        raise MatrixFormatError(f"{path}: expected a single row or column, got shape {M.shape}")
    return M.ravel()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the global seed.

    Each name maps to its own ``SeedSequence`` so adding a consumer leaves
    the draws of the others unchanged.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
