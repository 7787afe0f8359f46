"""Empirical-measure arithmetic: ensembles, transport distances, pushforwards,
density interpolation and resampling.

All types are immutable after construction and every operation is a pure
function of its inputs, so everything here is safe to call concurrently.
Randomness always flows through an explicit 64-bit seed fed to a Philox
counter-based generator (see :func:`make_rng`).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

#: floor below which a density is treated as vacuum when dividing by it
DENSITY_FLOOR = 1e-10

#: documented cap for the exact-assignment transport path in d >= 2
ASSIGNMENT_SIZE_CAP = 512


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator for a 64-bit seed and derived stream.

    Identical (seed, stream) pairs replay the identical sample stream, which
    is what the determinism contract of the whole artifact rests on.
    """
    return np.random.Generator(np.random.Philox(seed=[int(seed), int(stream)]))


class MeasureError(ValueError):
    """Raised on invalid measure construction or incompatible operands."""


def _as_points(points, dim=None) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise MeasureError("ensemble needs a nonempty 2-d point array")
    if dim is not None and pts.shape[1] != dim:
        raise MeasureError(f"expected dimension {dim}, got {pts.shape[1]}")
    if not np.all(np.isfinite(pts)):
        raise MeasureError("ensemble points must be finite")
    pts = pts.copy()
    pts.setflags(write=False)
    return pts


@dataclass(frozen=True)
class ParticleEnsemble:
    """Equal-weight empirical measure on R^d, stored as an (N, d) array."""

    points: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dim", pts.shape[1])

    def __len__(self) -> int:
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def std(self) -> np.ndarray:
        return self.points.std(axis=0)

    def translate(self, shift) -> "ParticleEnsemble":
        return ParticleEnsemble(self.points + np.asarray(shift, dtype=float))

    def with_point(self, i: int, new_point) -> "ParticleEnsemble":
        pts = np.array(self.points)
        pts[i] = np.asarray(new_point, dtype=float)
        return ParticleEnsemble(pts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow([f"x_{j + 1}" for j in range(self.dim)])
        for row in self.points:
            w.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "ParticleEnsemble":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or not rows[0] or not rows[0][0].startswith("x_"):
            raise MeasureError("ensemble CSV needs an x_1..x_d header")
        data = [[float(v) for v in row] for row in rows[1:] if row]
        return ParticleEnsemble(np.asarray(data))


@dataclass(frozen=True)
class JointEnsemble:
    """Equal-weight empirical measure on R^{2d}: pairs of (state, second
    coordinate), where the second slot holds a momentum or a control."""

    pairs: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        pts = _as_points(self.pairs)
        if pts.shape[1] % 2 != 0:
            raise MeasureError("joint ensemble needs an even coordinate count")
        object.__setattr__(self, "pairs", pts)
        object.__setattr__(self, "dim", pts.shape[1] // 2)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @staticmethod
    def from_arrays(states, seconds) -> "JointEnsemble":
        a = np.atleast_2d(np.asarray(states, dtype=float).T).T
        if a.ndim == 1:
            a = a[:, None]
        b = np.atleast_2d(np.asarray(seconds, dtype=float).T).T
        if b.ndim == 1:
            b = b[:, None]
        if a.shape != b.shape:
            raise MeasureError("state/second arrays must have matching shapes")
        return JointEnsemble(np.hstack([a, b]))

    @property
    def states(self) -> np.ndarray:
        return self.pairs[:, : self.dim]

    @property
    def seconds(self) -> np.ndarray:
        return self.pairs[:, self.dim :]

    def first_marginal(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.states)

    def with_seconds(self, seconds) -> "JointEnsemble":
        return JointEnsemble.from_arrays(self.states, seconds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        d = self.dim
        w.writerow([f"x_{j + 1}" for j in range(d)] + [f"p_{j + 1}" for j in range(d)])
        for row in self.pairs:
            w.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "JointEnsemble":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or not rows[0] or not rows[0][0].startswith("x_"):
            raise MeasureError("joint CSV needs an x_1..,p_1.. header")
        data = [[float(v) for v in row] for row in rows[1:] if row]
        return JointEnsemble(np.asarray(data))


@dataclass(frozen=True)
class DensityGrid1d:
    """Probability density sampled on a uniform grid, trapezoid-normalized."""

    x_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if x.ndim != 1 or x.size < 2 or v.shape != x.shape:
            raise MeasureError("grid and values must be matching 1-d arrays")
        dx = np.diff(x)
        if not np.allclose(dx, dx[0], rtol=1e-10, atol=1e-14):
            raise MeasureError("x_grid must be uniform")
        if np.any(v < 0):
            raise MeasureError("density values must be nonnegative")
        mass = np.trapezoid(v, x)
        if mass <= 0 or not np.isfinite(mass):
            raise MeasureError("density must have positive finite mass")
        v = v / mass
        x = x.copy()
        v = v.copy()
        x.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "x_grid", x)
        object.__setattr__(self, "values", v)

    @property
    def dx(self) -> float:
        return float(self.x_grid[1] - self.x_grid[0])

    def mass(self) -> float:
        return float(np.trapezoid(self.values, self.x_grid))

    def mean(self) -> float:
        return float(np.trapezoid(self.values * self.x_grid, self.x_grid))

    def variance(self) -> float:
        m = self.mean()
        return float(np.trapezoid(self.values * (self.x_grid - m) ** 2, self.x_grid))

    def cumulative(self) -> np.ndarray:
        """Trapezoidal CDF samples on x_grid (F(x_0)=0)."""
        v = self.values
        inc = 0.5 * (v[1:] + v[:-1]) * self.dx
        return np.concatenate([[0.0], np.cumsum(inc)])

    def quantiles(self, levels) -> np.ndarray:
        cdf = self.cumulative()
        cdf = cdf / cdf[-1]
        # strictly increasing version for interpolation
        eps = np.arange(cdf.size) * 1e-15
        return np.interp(np.asarray(levels, dtype=float), cdf + eps, self.x_grid)

    def sample_ensemble(self, n: int) -> ParticleEnsemble:
        """Deterministic quantile sampling at mid-rank levels."""
        levels = (np.arange(n) + 0.5) / n
        return ParticleEnsemble(self.quantiles(levels))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["x", "value"])
        for xi, vi in zip(self.x_grid, self.values):
            w.writerow([f"{xi:.17g}", f"{vi:.17g}"])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "DensityGrid1d":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:2] != ["x", "value"]:
            raise MeasureError("density CSV needs an x,value header")
        data = np.asarray([[float(row[0]), float(row[1])] for row in rows[1:] if row])
        return DensityGrid1d(data[:, 0], data[:, 1])


def gaussian_density(mean: float, std: float, x_grid: np.ndarray) -> DensityGrid1d:
    x = np.asarray(x_grid, dtype=float)
    v = np.exp(-0.5 * ((x - mean) / std) ** 2)
    return DensityGrid1d(x, v)


# ---------------------------------------------------------------------------
# transport distances
# ---------------------------------------------------------------------------


def _quantile_distance_1d(a: np.ndarray, b: np.ndarray, order: int) -> float:
    """Exact W_p between two equal-weight 1-d samples of any sizes, via the
    common refinement of the two quantile staircases."""
    xa = np.sort(a.ravel())
    xb = np.sort(b.ravel())
    na, nb = xa.size, xb.size
    if na == nb:
        diff = np.abs(xa - xb)
        if order == 1:
            return float(diff.mean())
        return float(np.sqrt((diff**2).mean()))
    levels = np.union1d(np.arange(1, na + 1) / na, np.arange(1, nb + 1) / nb)
    widths = np.diff(np.concatenate([[0.0], levels]))
    ia = np.minimum((np.ceil(levels * na) - 1).astype(int), na - 1)
    ib = np.minimum((np.ceil(levels * nb) - 1).astype(int), nb - 1)
    diff = np.abs(xa[ia] - xb[ib])
    if order == 1:
        return float(np.sum(widths * diff))
    return float(np.sqrt(np.sum(widths * diff**2)))


def wasserstein(order: int, A: ParticleEnsemble, B: ParticleEnsemble) -> float:
    """Exact W_1 / W_2 between equal-weight ensembles.

    d = 1 goes through the sorted-quantile coupling (any sizes); d >= 2 uses
    an optimal assignment (Hungarian) and requires equal sizes.
    """
    if order not in (1, 2):
        raise MeasureError("order must be 1 or 2")
    if A.dim != B.dim:
        raise MeasureError("dimension mismatch")
    if A.dim == 1:
        return _quantile_distance_1d(A.points, B.points, order)
    if len(A) != len(B):
        raise MeasureError("d >= 2 transport requires equal ensemble sizes")
    if len(A) > ASSIGNMENT_SIZE_CAP:
        raise MeasureError(f"assignment path capped at N <= {ASSIGNMENT_SIZE_CAP}")
    diff = A.points[:, None, :] - B.points[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    cost = sq if order == 2 else np.sqrt(sq)
    rows, cols = linear_sum_assignment(cost)
    total = cost[rows, cols].mean()
    return float(np.sqrt(total)) if order == 2 else float(total)


def wasserstein_assignment_1d(order: int, A: ParticleEnsemble, B: ParticleEnsemble) -> float:
    """LP-assignment evaluation of W_p in d = 1; oracle twin of the
    sorted-quantile path (equal sizes only)."""
    if len(A) != len(B):
        raise MeasureError("assignment oracle requires equal sizes")
    diff = np.abs(A.points[:, None, 0] - B.points[None, :, 0])
    cost = diff**2 if order == 2 else diff
    rows, cols = linear_sum_assignment(cost)
    total = cost[rows, cols].mean()
    return float(np.sqrt(total)) if order == 2 else float(total)


# ---------------------------------------------------------------------------
# pushforward / interpolation / resampling
# ---------------------------------------------------------------------------


def pushforward(A: ParticleEnsemble, map_fn) -> JointEnsemble:
    """(id, map)# applied to an ensemble; first marginal is A, bitwise."""
    out = np.asarray([np.atleast_1d(np.asarray(map_fn(x), dtype=float)) for x in A.points])
    if out.shape != A.points.shape:
        raise MeasureError("map must return vectors matching the state dimension")
    if not np.all(np.isfinite(out)):
        raise MeasureError("map returned a non-finite value")
    return JointEnsemble(np.hstack([A.points, out]))


def mixture_interpolate(m1: DensityGrid1d, m2: DensityGrid1d, t: float) -> DensityGrid1d:
    """Pointwise mixture t*m1 + (1-t)*m2 on a shared grid."""
    if m1.x_grid.shape != m2.x_grid.shape or not np.array_equal(m1.x_grid, m2.x_grid):
        raise MeasureError("mixture requires identical grids")
    if not 0.0 <= t <= 1.0:
        raise MeasureError("t must lie in [0, 1]")
    return DensityGrid1d(m1.x_grid, t * m1.values + (1.0 - t) * m2.values)


def geodesic_velocity_1d(
    m1: DensityGrid1d,
    m2: DensityGrid1d,
    t: float,
    where: np.ndarray | None = None,
    floor: float = DENSITY_FLOOR,
) -> np.ndarray:
    """Velocity field v_t = (F2 - F1) / m_t of the mixture path, solving the
    1-d continuity equation with zero flux at the boundary.

    `where` is an optional boolean mask restricting the request to the
    support; densities below `floor` at a requested point raise.
    """
    mt = mixture_interpolate(m1, m2, t)
    f1 = m1.cumulative()
    f2 = m2.cumulative()
    vals = mt.values
    mask = np.ones_like(vals, dtype=bool) if where is None else np.asarray(where, dtype=bool)
    if np.any(vals[mask] <= floor):
        raise MeasureError("density below floor at a requested point (near-vacuum)")
    v = np.zeros_like(vals)
    v[mask] = (f2[mask] - f1[mask]) / vals[mask]
    return v


def independent_copy(A: ParticleEnsemble, seed: int) -> ParticleEnsemble:
    """Resample-with-replacement copy of A, deterministic under the seed;
    same empirical law in expectation."""
    if len(A) == 1:
        return ParticleEnsemble(A.points)
    rng = make_rng(seed, stream=1)
    idx = rng.integers(0, len(A), size=len(A))
    return ParticleEnsemble(A.points[idx])


def independent_copy_indices(n: int, seed: int) -> np.ndarray:
    """Index stream used by :func:`independent_copy`, exposed so paired
    tilde-copies can reuse one resampling across several arrays."""
    if n == 1:
        return np.zeros(1, dtype=int)
    rng = make_rng(seed, stream=1)
    return rng.integers(0, n, size=n)
