"""Synthetic 2D regression benchmark with multi-scale predictive regions.

Each sample is white noise smoothed by a Gaussian kernel, then mixed by the
square root of a covariance that couples the predictive regions.  Targets
are the true linear response plus white noise at a fixed SNR.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import convolve1d

from .io import rng_stream
from .loss import Dataset

__all__ = [
    "SpecError",
    "Region",
    "SimulationSpec",
    "gaussian_kernel1d",
    "blur",
    "covariance_block",
    "covariance_matrix",
    "covariance_sqrt",
    "make_truth",
    "simulate",
]


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle of cells ``[row, row+height) x [col, col+width)``."""

    name: str
    row: int
    col: int
    height: int
    width: int
    value: float = 1.0

    def cells(self, dims) -> np.ndarray:
        nx, ny = dims
        if self.height < 0 or self.width < 0:
            raise SpecError(f"region {self.name} has negative extent")
        if self.row < 0 or self.col < 0 or self.row + self.height > nx or self.col + self.width > ny:
            raise SpecError(f"region {self.name} extends outside the {nx}x{ny} grid")
        r, c = np.meshgrid(np.arange(self.row, self.row + self.height),
                           np.arange(self.col, self.col + self.width), indexing="ij")
        return np.sort((r * ny + c).ravel())


def _default_regions():
    return (
        Region("C1", 6, 6, 8, 8, 1.0),
        Region("C2", 26, 6, 8, 8, 1.0),
        Region("C3", 6, 31, 3, 3, 1.0),
    )


@dataclass(frozen=True)
class SimulationSpec:
    """Parameters of the synthetic experiment.

    ``cov12`` couples C1 with C2 and ``cov23`` couples C2 with C3.
    ``coupling="voxel"`` puts these values on every cross-region voxel pair;
    with large regions that matrix is indefinite and raises
    :class:`SpecError`.  ``coupling="region"`` divides them by
    ``sqrt(|Ca| |Cb|)`` so that they become the covariances of the
    region-average signals, which keeps the matrix positive semidefinite
    whenever the 3x3 region-level matrix is.
    """

    n: int = 300
    dims: tuple = (40, 40)
    sigma: float = 2.0
    truncate: float = 4.0
    regions: tuple = field(default_factory=_default_regions)
    cov12: float = 0.3
    cov23: float = -0.2
    snr_db: float = 10.0
    seed: int = 0
    coupling: str = "region"

    def __post_init__(self):
        if self.n < 1 or len(self.dims) != 2 or min(self.dims) < 1:
            raise SpecError("n and dims must be positive")
        if not np.isfinite(self.snr_db):
            raise SpecError("SNR must be finite")
        if self.sigma < 0:
            raise SpecError("sigma must be >= 0")
        if self.coupling not in ("region", "voxel"):
            raise SpecError(f"coupling must be 'region' or 'voxel', got {self.coupling!r}")
        if len(self.regions) != 3:
            raise SpecError("exactly three regions (C1, C2, C3) are required")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1]

    def region_cells(self) -> list[np.ndarray]:
        cells = [r.cells(self.dims) for r in self.regions]
        seen = np.zeros(self.n_voxels, dtype=bool)
        for r, c in zip(self.regions, cells):
            if seen[c].any():
                raise SpecError(f"region {r.name} overlaps another region")
            seen[c] = True
        return cells

    def to_text(self) -> str:
        lines = [
            f"n = {self.n}",
            f"dims = {self.dims[0]},{self.dims[1]}",
            f"sigma = {self.sigma!r}",
            f"truncate = {self.truncate!r}",
            f"cov12 = {self.cov12!r}",
            f"cov23 = {self.cov23!r}",
            f"snr_db = {self.snr_db!r}",
            f"seed = {self.seed}",
            f"coupling = {self.coupling}",
        ]
        for r in self.regions:
            lines.append(f"region.{r.name} = {r.row},{r.col},{r.height},{r.width},{r.value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "SimulationSpec":
        """Parse ``key = value`` lines (``#`` comments allowed)."""
        kw = {}
        regions = dict((r.name, r) for r in _default_regions())
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpecError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            val = val.strip("\"'")
            try:
                if key.startswith("region."):
                    name = key.split(".", 1)[1]
                    r0, c0, h, w, v = val.split(",")
                    regions[name] = Region(name, int(r0), int(c0), int(h), int(w), float(v))
                elif key == "dims":
                    kw["dims"] = tuple(int(t) for t in val.split(","))
                elif key in ("n", "seed"):
                    kw[key] = int(val)
                elif key in ("sigma", "truncate", "cov12", "cov23", "snr_db"):
                    kw[key] = float(val)
                elif key == "coupling":
                    kw[key] = val
                else:
                    raise SpecError(f"line {lineno}: unknown key {key!r}")
            except ValueError:
                raise SpecError(f"line {lineno}: bad value for {key!r}: {val!r}") from None
        kw["regions"] = tuple(regions.values())
        kw.update(overrides)
        return cls(**kw)

    def with_seed(self, seed: int) -> "SimulationSpec":
        return replace(self, seed=int(seed))


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Normalized Gaussian weights on ``[-r, r]`` with ``r = round(truncate*sigma)``."""
    if sigma == 0:
        return np.ones(1)
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(images, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Separable Gaussian smoothing of a stack of 2D images (mirror boundary)."""
    k = gaussian_kernel1d(sigma, truncate)
    out = convolve1d(np.asarray(images, dtype=float), k, axis=-1, mode="reflect")
    return convolve1d(out, k, axis=-2, mode="reflect")


def covariance_block(spec: SimulationSpec):
    """Voxel ids of all regions and the covariance restricted to them.

    Outside these voxels the covariance is the identity.
    """
    c1, c2, c3 = spec.region_cells()
    idx = np.concatenate([c1, c2, c3])
    n1, n2, n3 = len(c1), len(c2), len(c3)
    a12, a23 = spec.cov12, spec.cov23
    if spec.coupling == "region":
        a12 = a12 / np.sqrt(n1 * n2) if n1 * n2 else 0.0
        a23 = a23 / np.sqrt(n2 * n3) if n2 * n3 else 0.0
    S = np.eye(len(idx))
    s1, s2, s3 = slice(0, n1), slice(n1, n1 + n2), slice(n1 + n2, len(idx))
    S[s1, s2] = a12
    S[s2, s1] = a12
    S[s2, s3] = a23
    S[s3, s2] = a23
    return idx, S


def covariance_matrix(spec: SimulationSpec) -> np.ndarray:
    """Dense (p, p) covariance."""
    idx, S = covariance_block(spec)
    C = np.eye(spec.n_voxels)
    C[np.ix_(idx, idx)] = S
    return C


def covariance_sqrt(spec: SimulationSpec):
    """``(idx, B)`` with ``B`` the symmetric square root of the region block.

    Eigenvalues below -1e-10 raise :class:`SpecError`; the remaining
    negative round-off is clamped to zero.
    """
    idx, S = covariance_block(spec)
    if len(idx) == 0:
        return idx, S
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < -1e-10:
        raise SpecError(
            f"covariance is not positive semidefinite (smallest eigenvalue {vals.min():.4g})"
        )
    vals = np.maximum(vals, 0.0)
    B = (vecs * np.sqrt(vals)) @ vecs.T
    return idx, 0.5 * (B + B.T)


def make_truth(spec: SimulationSpec) -> np.ndarray:
    w = np.zeros(spec.n_voxels)
    for r, cells in zip(spec.regions, spec.region_cells()):
        w[cells] = r.value
    return w


def simulate(spec: SimulationSpec | None = None) -> Dataset:
    """Draw the design and noisy targets; deterministic given ``spec.seed``.

    The noise is rescaled so that its empirical variance is exactly the
    empirical signal variance divided by ``10 ** (snr_db / 10)``.
    """
    spec = spec or SimulationSpec()
    nx, ny = spec.dims
    w = make_truth(spec)
    idx, B = covariance_sqrt(spec)
    raw = rng_stream(spec.seed, "simulate.images").standard_normal((spec.n, nx, ny))
    X = blur(raw, spec.sigma, spec.truncate).reshape(spec.n, nx * ny)
    if len(idx):
        X[:, idx] = X[:, idx] @ B
    signal = X @ w
    eps = rng_stream(spec.seed, "simulate.noise").standard_normal(spec.n)
    var_s = float(np.var(signal))
    target = var_s / 10.0 ** (spec.snr_db / 10.0)
    sd = float(np.std(eps))
    eps = eps * (np.sqrt(target) / sd) if sd > 0 else eps * 0.0
    return Dataset(X, signal + eps)
