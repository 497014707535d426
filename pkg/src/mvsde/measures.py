"""Probability measures as weighted particle ensembles and grid densities.

A :class:`Measure` is a finite weighted particle ensemble on R^d with unit
total mass; a :class:`Density` holds values of a probability density at the
cell centers of a rectangular grid (d <= 2); a :class:`Flow` is a
time-indexed path of measures on a strictly increasing time grid.  All three
are immutable after construction and every operation here is a pure function
of its inputs (plus an explicit seed), so concurrent use is safe.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DomainError, NumericsError

WEIGHT_TOL = 1e-12
MASS_TOL = 1e-6

DEFAULT_CELLS = {1: 1024, 2: 128}

# Fixed internal seed offset for the equal-weight resampling performed by
# consumers that need a deterministic sub-stream (kept distinct from user
# seeds so that seed=0 draws differ between contexts).
_RESAMPLE_STREAM = 0x9E3779B9


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts[:, None]
    elif pts.ndim != 2:
        raise DomainError(f"points must be a (n, d) array, got ndim={pts.ndim}")
    return pts


@dataclass(frozen=True, eq=False)
class Measure:
    """Weighted particle ensemble representing a probability law on R^d."""

    points: np.ndarray
    weights: np.ndarray
    dim: int

    def __post_init__(self):
        pts = _as_points(self.points)
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] == 0:
            raise DomainError("a Measure needs at least one particle")
        if pts.shape != (w.shape[0], self.dim):
            raise DomainError(
                f"points shape {pts.shape} incompatible with "
                f"{w.shape[0]} weights in dimension {self.dim}"
            )
        if not np.all(np.isfinite(pts)):
            raise NumericsError("non-finite particle position")
        if np.any(w < 0):
            raise DomainError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise DomainError(f"weights sum to {w.sum()!r}, expected 1 within {WEIGHT_TOL}")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_points(cls, points, weights=None) -> "Measure":
        pts = _as_points(points)
        n, d = pts.shape
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=float)
            s = w.sum()
            if s <= 0:
                raise DomainError("weights must have positive total mass")
            w = w / s
        return cls(pts, w, d)

    @classmethod
    def dirac(cls, x) -> "Measure":
        pts = np.asarray(x, dtype=float).ravel()[None, :]
        return cls(pts, np.array([1.0]), pts.shape[1])

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def shift(self, v) -> "Measure":
        """Translate every particle by the vector ``v``."""
        v = np.asarray(v, dtype=float).ravel()
        if v.shape != (self.dim,):
            raise DomainError(f"shift vector must have length {self.dim}")
        return Measure(self.points + v, self.weights, self.dim)

    def to_csv(self, path_or_buf) -> None:
        """Write ``w,x1[,x2]`` rows (UTF-8, '.' decimal separator)."""
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            fh = open(path_or_buf, "w", newline="", encoding="utf-8")
            close = True
        else:
            fh = path_or_buf
        try:
            writer = csv.writer(fh)
            writer.writerow(["w"] + [f"x{j + 1}" for j in range(self.dim)])
            for w, row in zip(self.weights, self.points):
                writer.writerow([repr(float(w))] + [repr(float(c)) for c in row])
        finally:
            if close:
                fh.close()

    @classmethod
    def from_csv(cls, path_or_buf) -> "Measure":
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            fh = open(path_or_buf, "r", newline="", encoding="utf-8")
            close = True
        else:
            fh = path_or_buf
        try:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "w":
                raise DomainError(f"expected header starting with 'w', got {header!r}")
            rows = [[float(v) for v in row] for row in reader if row]
        finally:
            if close:
                fh.close()
        data = np.asarray(rows, dtype=float)
        return cls.from_points(data[:, 1:], data[:, 0])


def moment_k(m: Measure, k: float) -> float:
    """k-th moment norm: (sum w_i |x_i|^k)^(1/k) for k >= 1.

    For k = 0 returns 1; for 0 < k < 1 the outer root is omitted, matching
    the k-vee-1 exponent convention of the transport distances.
    """
    if k < 0:
        raise DomainError(f"moment order must be nonnegative, got {k}")
    if k == 0:
        return 1.0
    r = np.linalg.norm(m.points, axis=1)
    s = float(np.sum(m.weights * r**k))
    return s ** (1.0 / k) if k >= 1 else s


def integrate(m: Measure, f) -> float:
    """Empirical integral sum(w_i * f(x_i)); f maps a length-d vector to a scalar."""
    vals = np.array([float(f(p)) for p in m.points])
    if not np.all(np.isfinite(vals)):
        bad = m.points[~np.isfinite(vals)][0]
        raise NumericsError(f"integrand returned a non-finite value at {bad}")
    return float(np.sum(m.weights * vals))


def resample(m: Measure, n: int, seed: int) -> Measure:
    """Systematic (low-variance) resampling to n equal-weight particles."""
    if n < 1:
        raise DomainError(f"resample size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    u = rng.random()
    positions = (np.arange(n) + u) / n
    cum = np.cumsum(m.weights)
    cum[-1] = 1.0
    idx = np.searchsorted(cum, positions, side="left")
    return Measure(m.points[idx], np.full(n, 1.0 / n), m.dim)


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid: per-axis bounds and cell counts; values live at centers."""

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).ravel()
        hi = np.asarray(self.hi, dtype=float).ravel()
        shape = tuple(int(s) for s in np.atleast_1d(self.shape))
        if not (len(lo) == len(hi) == len(shape)):
            raise DomainError("grid lo/hi/shape must share one length per axis")
        if len(lo) not in (1, 2):
            raise DomainError("grids support dimension 1 or 2 only")
        if np.any(hi <= lo) or any(s < 2 for s in shape):
            raise DomainError("grid needs hi > lo and at least 2 cells per axis")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    def widths(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.shape)

    def cell_volume(self) -> float:
        return float(np.prod(self.widths()))

    def axes(self):
        """Per-axis cell-center coordinates."""
        w = self.widths()
        return [
            self.lo[j] + (np.arange(self.shape[j]) + 0.5) * w[j]
            for j in range(self.dim)
        ]

    def centers(self) -> np.ndarray:
        """All cell centers as an (n_cells, dim) array (C order)."""
        ax = self.axes()
        if self.dim == 1:
            return ax[0][:, None]
        g = np.meshgrid(*ax, indexing="ij")
        return np.stack([a.ravel() for a in g], axis=1)

    def same_as(self, other: "GridSpec", tol: float = 1e-12) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.lo, other.lo, atol=tol, rtol=0)
            and np.allclose(self.hi, other.hi, atol=tol, rtol=0)
        )


@dataclass(frozen=True, eq=False)
class Density:
    """Probability density values at the cell centers of a grid (d <= 2)."""

    grid: GridSpec
    values: np.ndarray
    normalized: bool = True
    coverage_warning: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise DomainError(f"values shape {vals.shape} != grid shape {self.grid.shape}")
        if np.any(vals < 0):
            raise DomainError("density values must be nonnegative")
        if self.normalized and abs(self.mass_of(vals) - 1.0) > MASS_TOL:
            raise DomainError(f"density mass {self.mass_of(vals)!r} not within {MASS_TOL} of 1")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def mass_of(self, vals) -> float:
        return float(np.sum(vals) * self.grid.cell_volume())

    @property
    def mass(self) -> float:
        return self.mass_of(self.values)

    @property
    def dim(self) -> int:
        return self.grid.dim

    def to_csv(self, path_or_buf) -> None:
        """Write ``x1[,x2],value`` rows."""
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            fh = open(path_or_buf, "w", newline="", encoding="utf-8")
            close = True
        else:
            fh = path_or_buf
        try:
            writer = csv.writer(fh)
            writer.writerow([f"x{j + 1}" for j in range(self.dim)] + ["value"])
            centers = self.grid.centers()
            for xc, v in zip(centers, self.values.ravel()):
                writer.writerow([repr(float(c)) for c in xc] + [repr(float(v))])
        finally:
            if close:
                fh.close()

    @classmethod
    def from_csv(cls, path_or_buf) -> "Density":
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            fh = open(path_or_buf, "r", newline="", encoding="utf-8")
            close = True
        else:
            fh = path_or_buf
        try:
            reader = csv.reader(fh)
            header = next(reader)
            dim = len(header) - 1
            rows = [[float(v) for v in row] for row in reader if row]
        finally:
            if close:
                fh.close()
        data = np.asarray(rows, dtype=float)
        axes = [np.unique(data[:, j]) for j in range(dim)]
        shape = tuple(len(a) for a in axes)
        widths = [a[1] - a[0] for a in axes]
        lo = np.array([a[0] - w / 2 for a, w in zip(axes, widths)])
        hi = np.array([a[-1] + w / 2 for a, w in zip(axes, widths)])
        vals = data[:, dim].reshape(shape)
        return cls(GridSpec(lo, hi, shape), vals, normalized=False)


def silverman_bandwidth(m: Measure) -> np.ndarray:
    """Silverman's rule-of-thumb bandwidth, per axis, for a weighted sample.

    Uses the effective sample size 1 / sum(w^2).  In 1D applies the classic
    0.9 * min(std, IQR/1.34) * n^(-1/5); in 2D the normal-reference factor
    (4/(d+2))^(1/(d+4)) * std * n^(-1/(d+4)).
    """
    n_eff = 1.0 / float(np.sum(m.weights**2))
    mean = np.average(m.points, axis=0, weights=m.weights)
    var = np.average((m.points - mean) ** 2, axis=0, weights=m.weights)
    std = np.sqrt(var)
    d = m.dim
    if d == 1:
        iqr = _weighted_quantile(m, 0.75) - _weighted_quantile(m, 0.25)
        scale = np.where(iqr > 0, np.minimum(std, iqr / 1.34), std)
        bw = 0.9 * scale * n_eff ** (-1.0 / 5.0)
    else:
        factor = (4.0 / (d + 2)) ** (1.0 / (d + 4))
        bw = factor * std * n_eff ** (-1.0 / (d + 4))
    bw = np.atleast_1d(np.asarray(bw, dtype=float))
    if np.any(bw <= 0):
        raise DomainError(
            "Silverman bandwidth degenerated to 0 (zero spread); pass an explicit bandwidth"
        )
    return bw


def _weighted_quantile(m: Measure, q: float) -> np.ndarray:
    order = np.argsort(m.points, axis=0)
    out = np.empty(m.dim)
    for j in range(m.dim):
        idx = order[:, j]
        cum = np.cumsum(m.weights[idx])
        pos = np.searchsorted(cum, q * cum[-1], side="left")
        out[j] = m.points[idx[min(pos, m.n - 1)], j]
    return out


def auto_grid(m: Measure, bandwidth, cells=None) -> GridSpec:
    """Grid fitted to the particle range extended by 4 bandwidths per axis."""
    bw = np.broadcast_to(np.atleast_1d(np.asarray(bandwidth, dtype=float)), (m.dim,))
    if cells is None:
        cells = DEFAULT_CELLS[m.dim]
    lo = m.points.min(axis=0) - 4.0 * bw
    hi = m.points.max(axis=0) + 4.0 * bw
    span = hi - lo
    # Guard against a zero-width axis (single atom): open up one bandwidth.
    hi = np.where(span > 0, hi, hi + bw)
    lo = np.where(span > 0, lo, lo - bw)
    return GridSpec(lo, hi, (cells,) * m.dim)


def pooled_grid(measures, bandwidth=None, cells=None):
    """Shared grid (and pooled Silverman bandwidth) for comparing several laws.

    Pools all particles with their weights (renormalized) so that symmetric
    distances are evaluated with one grid and one bandwidth.
    """
    measures = list(measures)
    dim = measures[0].dim
    pts = np.concatenate([m.points for m in measures], axis=0)
    w = np.concatenate([m.weights for m in measures])
    pooled = Measure.from_points(pts, w)
    if bandwidth is None:
        bandwidth = silverman_bandwidth(pooled)
    bw = np.broadcast_to(np.atleast_1d(np.asarray(bandwidth, dtype=float)), (dim,))
    return auto_grid(pooled, bw, cells=cells), bw


def to_density(m: Measure, grid: GridSpec | None = None, bandwidth=None, cells=None) -> Density:
    """Gaussian kernel density estimate on a grid, renormalized to unit mass.

    The estimate is computed by binning particles into grid cells and
    convolving with a Gaussian of the requested bandwidth (binned KDE); the
    binning error is O((cell width / bandwidth)^2) and negligible for the
    default grids.  If the grid fails to cover the particle range extended
    by 4 bandwidths per axis (a 99.9%-mass proxy), the output carries
    ``coverage_warning=True``.
    """
    if m.dim > 2:
        raise DomainError("grid densities support dimension <= 2")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(m)
    bw = np.broadcast_to(np.atleast_1d(np.asarray(bandwidth, dtype=float)), (m.dim,)).copy()
    if np.any(bw <= 0):
        raise DomainError("bandwidth must be positive")
    if grid is None:
        grid = auto_grid(m, bw, cells=cells)

    warn = bool(
        np.any(m.points.min(axis=0) - 4.0 * bw < grid.lo)
        or np.any(m.points.max(axis=0) + 4.0 * bw > grid.hi)
    )

    hist = _linear_binning(m, grid)
    sigma_cells = bw / grid.widths()
    smooth = ndimage.gaussian_filter(hist, sigma=sigma_cells, mode="constant", truncate=10.0)
    vals = smooth / grid.cell_volume()
    mass = float(vals.sum() * grid.cell_volume())
    if mass <= 0:
        raise NumericsError("all mass fell outside the grid")
    vals = vals / mass
    return Density(grid, vals, normalized=True, coverage_warning=warn)


def _linear_binning(m: Measure, grid: GridSpec) -> np.ndarray:
    """Assign particle mass to the one or two nearest cell centers per axis.

    Second-order accurate and symmetry-preserving (an atom on a cell edge
    splits evenly).  Particles outside the grid are dropped; the caller
    renormalizes.
    """
    w = grid.widths()
    pos = (m.points - grid.lo) / w - 0.5  # in cell-center coordinates
    base = np.floor(pos).astype(int)
    frac = pos - base
    hist = np.zeros(grid.shape)
    shape = np.asarray(grid.shape)
    for corner in range(2**grid.dim):
        offs = np.array([(corner >> j) & 1 for j in range(grid.dim)])
        idx = base + offs
        weight = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1) * m.weights
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        if not np.any(ok):
            continue
        np.add.at(hist, tuple(idx[ok].T), weight[ok])
    return hist


@dataclass(frozen=True, eq=False)
class Flow:
    """Time-indexed path of measures on a strictly increasing time grid."""

    times: np.ndarray
    measures: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        ms = tuple(self.measures)
        if len(ms) == 0 or len(t) != len(ms):
            raise DomainError("a Flow needs one measure per time node (>= 1)")
        if np.any(np.diff(t) <= 0):
            raise DomainError("flow times must be strictly increasing")
        dims = {m.dim for m in ms}
        if len(dims) != 1:
            raise DomainError("all flow measures must share one dimension")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "measures", ms)

    @classmethod
    def constant(cls, m: Measure, times) -> "Flow":
        times = np.asarray(times, dtype=float).ravel()
        return cls(times, tuple(m for _ in times))

    @property
    def dim(self) -> int:
        return self.measures[0].dim

    def index_left(self, u: float) -> int:
        """Index of the node governing time u under left-constant interpolation."""
        if u < self.times[0] - 1e-12:
            raise DomainError(f"time {u} precedes the flow start {self.times[0]}")
        i = int(np.searchsorted(self.times, u + 1e-12, side="right") - 1)
        return min(max(i, 0), len(self.measures) - 1)

    def at(self, u: float) -> Measure:
        """Measure at time u (piecewise constant, left node)."""
        return self.measures[self.index_left(u)]

    def covers(self, t0: float, t1: float) -> bool:
        """Whether [t0, t1] is inside the flow's reach.

        Single-node flows are treated as constant in time and cover any
        interval starting at or after their node.
        """
        if self.times[0] > t0 + 1e-12:
            return False
        if len(self.measures) == 1:
            return True
        return self.times[-1] >= t1 - 1e-12

    def shift(self, v) -> "Flow":
        return Flow(self.times, tuple(m.shift(v) for m in self.measures))

    def resampled(self, n: int, seed: int) -> "Flow":
        return Flow(
            self.times,
            tuple(resample(m, n, seed + _RESAMPLE_STREAM + i) for i, m in enumerate(self.measures)),
        )

    def same_grid(self, other: "Flow", tol: float = 1e-9) -> bool:
        return len(self.times) == len(other.times) and np.allclose(
            self.times, other.times, atol=tol, rtol=0
        )
