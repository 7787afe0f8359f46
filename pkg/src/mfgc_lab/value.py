"""Value function V(t, x, mu) on measures, evaluated by re-solving the
equilibrium from (t, mu), plus the theorem-level checks built on it: the
master-equation residual stencil, monotonicity propagation along flows,
measure-Lipschitz ratio estimation, mixed state-measure derivatives, and the
two-stage semigroup consistency check."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .hamiltonian import ReducedHamiltonian, drift_field, reduced_ham
from .measures import DensityGrid1d, ParticleEnsemble, make_rng
from .models import JointLaw, StateLaw
from .monotonicity import disp_gap_U, ll_gap_U
from .solver import (
    FlowSolution,
    GridSpec,
    PicardConfig,
    SolverError,
    domain_for,
    equilibrium_picard,
    hamiltonian_min_many,
    solve_particle_fbsde,
)


@dataclass
class ValueConfig:
    """Numerical settings for value queries.

    The outer loop is undamped by default: value queries target the smooth
    fixtures where the equilibrium map is strongly contracting, and FD
    stencils over many nearby solves need the cheapest accurate path.
    `n_outer_fd` fixes the warm-started iteration count used inside FD
    stencils so every perturbed solve follows the same arithmetic path.
    """

    horizon: float = 1.0
    n_x: int = 200
    n_t: int = 400
    theta_out: float = 1.0
    tol_out: float = 1e-8
    max_outer: int = 80
    spread: float = 8.0
    allowance: float = 2.0
    x_min: float = None
    x_max: float = None
    kde_bandwidth: float = None
    fd_dx: float = 1e-4
    fd_dmu: float = 1e-3
    n_outer_fd: int = 3
    n_quantiles: int = 512
    n_paths: int = 20000
    seed: int = 0

    def picard(self) -> PicardConfig:
        return PicardConfig(theta_out=self.theta_out, max_outer=self.max_outer, tol_out=self.tol_out)


@dataclass
class ValueQuery:
    """Arguments of a value evaluation V(t0, x, mu0)."""

    rh: ReducedHamiltonian
    G: object
    t0: float
    x: float
    mu0: object  # ParticleEnsemble or DensityGrid1d
    method: str = "grid"
    config: ValueConfig = field(default_factory=ValueConfig)

    def __post_init__(self):
        if not 0.0 <= self.t0 <= self.config.horizon:
            raise SolverError("t0 must lie in [0, horizon]")
        if self.method not in ("grid", "particle"):
            raise SolverError("method must be 'grid' or 'particle'")


@dataclass
class FDConfig:
    """Finite-difference steps for the master-equation stencil."""

    dt: float = 1e-3
    dx: float = 1e-4
    dmu: float = 1e-3


@dataclass
class PropagationReport:
    kind: str
    checkpoints: np.ndarray
    gaps: np.ndarray  # (n_pairs, n_checkpoints)
    min_gap: float
    tolerance: float
    verdict: str

    def passed(self) -> bool:
        return self.verdict == "pass"


# ---------------------------------------------------------------------------
# measure plumbing
# ---------------------------------------------------------------------------


def silverman_bandwidth(points) -> float:
    """Gaussian-KDE rule-of-thumb bandwidth; frozen once per query so FD
    perturbations move particles, never the smoothing scale."""
    xs = np.asarray(points, dtype=float).ravel()
    n = xs.size
    if n < 2:
        return 0.5
    sd = float(np.std(xs, ddof=1))
    iqr = float(np.subtract(*np.percentile(xs, [75, 25])))
    scale = min(sd, iqr / 1.349) if iqr > 0 else sd
    return max(0.9 * scale * n ** (-0.2), 1e-3)


def kde_density(points, x_grid, bandwidth: float) -> np.ndarray:
    xs = np.asarray(points, dtype=float).ravel()
    z = (x_grid[:, None] - xs[None, :]) / bandwidth
    vals = np.exp(-0.5 * z**2).sum(axis=1) / (np.sqrt(2 * np.pi) * bandwidth * xs.size)
    return vals


def _mu_stats(mu0):
    if isinstance(mu0, DensityGrid1d):
        return mu0.mean(), np.sqrt(mu0.variance())
    pts = mu0.points[:, 0] if isinstance(mu0, ParticleEnsemble) else np.asarray(mu0, dtype=float)
    return float(np.mean(pts)), float(np.std(pts)) if pts.size > 1 else 1.0


def _density_on(mu0, xs, bandwidth):
    if isinstance(mu0, DensityGrid1d):
        vals = np.interp(xs, mu0.x_grid, mu0.values, left=0.0, right=0.0)
        if np.trapezoid(vals, xs) <= 0:
            raise SolverError("density support does not overlap the solver domain")
        return DensityGrid1d(xs, vals)
    pts = mu0.points[:, 0] if isinstance(mu0, ParticleEnsemble) else np.asarray(mu0, dtype=float)
    return DensityGrid1d(xs, kde_density(pts, xs, bandwidth))


def density_wasserstein(order: int, m1: DensityGrid1d, m2: DensityGrid1d, n_levels: int = 4096) -> float:
    """W_1 / W_2 between grid densities through their quantile functions."""
    levels = (np.arange(n_levels) + 0.5) / n_levels
    d = np.abs(m1.quantiles(levels) - m2.quantiles(levels))
    if order == 1:
        return float(np.mean(d))
    return float(np.sqrt(np.mean(d**2)))


class GridValue:
    """Grid-backed evaluator for one (mu0, domain, bandwidth) context.

    Solves are cached by (t0, density bytes); perturbed solves warm-start
    from the base solution with a fixed sweep count.
    """

    def __init__(self, rh, G, mu0, config: ValueConfig):
        self.rh = rh
        self.G = G
        self.config = config
        mean, std = _mu_stats(mu0)
        if config.x_min is not None and config.x_max is not None:
            self.x_min, self.x_max = config.x_min, config.x_max
        else:
            self.x_min, self.x_max = domain_for(mean, std, config.allowance, config.spread)
        self.bandwidth = config.kde_bandwidth
        if self.bandwidth is None and isinstance(mu0, ParticleEnsemble):
            self.bandwidth = silverman_bandwidth(mu0.points)
        self.mu0 = mu0
        self._cache = {}
        self._base = None

    def grid_for(self, t0: float, dt: float = None) -> GridSpec:
        T = self.config.horizon
        if dt is None:
            n_t = self.config.n_t
        else:
            n_t = max(2, int(round((T - t0) / dt))) if T > t0 else 2
        return GridSpec(self.x_min, self.x_max, self.config.n_x, t0, T, n_t)

    def solve(self, t0: float, mu0=None, dt: float = None, fixed: bool = False) -> FlowSolution:
        mu0 = self.mu0 if mu0 is None else mu0
        grid = self.grid_for(t0, dt)
        density = _density_on(mu0, grid.xs, self.bandwidth)
        key = (round(t0, 12), grid.n_t, density.values.tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        init = self._base if (fixed and self._base is not None and self._base.grid == grid) else None
        n_outer = self.config.n_outer_fd if (fixed and init is not None) else None
        sol = equilibrium_picard(
            self.rh, self.G, density, grid, self.config.picard(), init=init, n_outer=n_outer
        )
        if init is None and not sol.converged:
            raise SolverError("equilibrium iteration did not converge for a value query")
        self._cache[key] = sol
        if self._base is None:
            self._base = sol
        return sol

    def slice(self, t0: float, mu0=None, dt: float = None, fixed: bool = False):
        sol = self.solve(t0, mu0, dt, fixed)
        return CubicSpline(sol.grid.xs, sol.u[0])


def _evaluator(q: ValueQuery) -> GridValue:
    return GridValue(q.rh, q.G, q.mu0, q.config)


# ---------------------------------------------------------------------------
# value and spatial derivatives
# ---------------------------------------------------------------------------


def value(q: ValueQuery) -> float:
    """V(t0, x, mu0): u(t0, x) of the equilibrium flow started at (t0, mu0).

    Exact (bitwise) at grid nodes; cubic interpolation off-grid.
    """
    if q.method == "particle":
        return _particle_value(q)
    ev = _evaluator(q)
    sol = ev.solve(q.t0)
    xs = sol.grid.xs
    exact = np.nonzero(xs == q.x)[0]
    if exact.size:
        return float(sol.u[0][exact[0]])
    return float(CubicSpline(xs, sol.u[0])(q.x))


def value_gradient(q: ValueQuery) -> np.ndarray:
    """Central difference of u(t0, .) at x; shape (1,)."""
    ev = _evaluator(q)
    s = ev.slice(q.t0)
    h = q.config.fd_dx
    return np.array([(s(q.x + h) - s(q.x - h)) / (2 * h)])


def value_hessian(q: ValueQuery) -> np.ndarray:
    ev = _evaluator(q)
    s = ev.slice(q.t0)
    h = q.config.fd_dx
    return np.array([[(s(q.x + h) - 2 * s(q.x) + s(q.x - h)) / h**2]])


def _particle_value(q: ValueQuery) -> float:
    """Monte-Carlo cost of the optimal control from (t0, x) against the
    particle equilibrium flow."""
    cfg = q.config
    rh, m = q.rh, q.rh.model
    if isinstance(q.mu0, ParticleEnsemble):
        xi0 = q.mu0
    else:
        xi0 = q.mu0.sample_ensemble(cfg.n_paths)
    grid = GridSpec(
        *domain_for(*_mu_stats(q.mu0), cfg.allowance, cfg.spread),
        cfg.n_x,
        q.t0,
        cfg.horizon,
        max(2, int(round(cfg.n_t * (cfg.horizon - q.t0) / max(cfg.horizon, 1e-12)))),
    )
    paths = solve_particle_fbsde(rh, m.dxG, xi0, grid, beta=0.0, seed=cfg.seed)
    nt = grid.n_t
    dt = grid.dt
    rng = make_rng(cfg.seed, stream=21)
    n = cfg.n_paths
    x = np.full(n, float(q.x))
    noise = rng.normal(size=(nt, n)) * np.sqrt(dt)
    cost = np.zeros(n)
    warm = None
    for k in range(nt):
        nu = JointLaw.from_arrays(paths.X[k][:, None], paths.controls[k][:, None])
        order = np.argsort(paths.X[k])
        p = np.interp(x, paths.X[k][order], paths.Y[k][order])
        _, a = hamiltonian_min_many(rh, x[:, None], p[:, None], nu, a0=warm)
        warm = a
        cost += m.f(x[:, None], a, nu) * dt
        x = x + m.b(x[:, None], a, nu)[:, 0] * dt + noise[k]
    law = StateLaw.from_arrays(paths.X[-1][:, None])
    cost += m.G(x[:, None], law)
    return float(np.mean(cost))


# ---------------------------------------------------------------------------
# master-equation residual
# ---------------------------------------------------------------------------


def master_residual(q: ValueQuery, fd: FDConfig = None, slice_fn=None) -> float:
    """|dtV + (1/2) dxxV + H(x, dxV, rho) + MV| at (t0, x, mu0), with mu0 a
    particle ensemble and every measure derivative taken by single-particle
    perturbation scaled by N (empirical projection of the Lions derivative).

    MV = sum_i [ (1/2) d^2/dxt_i^2 + (d/dxt_i) dpH(xt_i, dxV(xt_i), rho) ]
    applied to V(t, x, emp(xt)); rho is the joint law of (xt_i, dxV(xt_i)).

    `slice_fn(t, points) -> callable u(.)` overrides the solver-backed value
    (used to measure the stencil floor on a closed-form reference).
    """
    fd = fd or FDConfig()
    if not isinstance(q.mu0, ParticleEnsemble):
        raise SolverError("master_residual needs a particle ensemble mu0")
    pts = q.mu0.points[:, 0].copy()
    n = pts.size
    T = q.config.horizon
    rh = q.rh

    if slice_fn is None:
        ev = _evaluator(q)

        def slice_fn(t, points):
            return ev.slice(t, ParticleEnsemble(points), dt=fd.dt, fixed=True)

        slice_fn(q.t0, pts)  # base solve first: everything else warm-starts

    base = slice_fn(q.t0, pts)
    x = float(q.x)
    h = fd.dx
    v0 = float(base(x))
    dxV = float((base(x + h) - base(x - h)) / (2 * h))
    dxxV = float((base(x + h) - 2 * v0 + base(x - h)) / h**2)

    # one-sided time step equal to one solver step; backward at the horizon
    if q.t0 + fd.dt <= T:
        ahead = slice_fn(q.t0 + fd.dt, pts)
        dtV = float((ahead(x) - v0) / fd.dt)
    else:
        behind = slice_fn(q.t0 - fd.dt, pts)
        dtV = float((v0 - behind(x)) / fd.dt)

    p_tilde = np.asarray((base(pts + h) - base(pts - h)) / (2 * h), dtype=float)
    rho = JointLaw.from_arrays(pts[:, None], p_tilde[:, None])
    H = reduced_ham(rh, np.array([x]), np.array([dxV]), rho)
    drifts, _, _ = drift_field(rh, pts[:, None], p_tilde[:, None], rho)

    eps = fd.dmu
    mv = 0.0
    for i in range(n):
        plus = pts.copy()
        plus[i] += eps
        minus = pts.copy()
        minus[i] -= eps
        vp = float(slice_fn(q.t0, plus)(x))
        vm = float(slice_fn(q.t0, minus)(x))
        first = (vp - vm) / (2 * eps)
        second = (vp - 2 * v0 + vm) / eps**2
        mv += 0.5 * second + first * drifts[i, 0]

    return abs(dtV + 0.5 * dxxV + float(H) + mv)


# ---------------------------------------------------------------------------
# propagation of monotonicity along the flow
# ---------------------------------------------------------------------------


def propagation_check(
    kind: str,
    rh: ReducedHamiltonian,
    G,
    mu0_pairs,
    checkpoints=None,
    config: ValueConfig = None,
    lam: float = 0.0,
    tolerance: float = 1e-6,
) -> PropagationReport:
    """Monotonicity of V(t, ., .) along equilibrium flows.

    For each initial density pair, both flows are solved on a common grid;
    at each checkpoint the flowed measures are coupled by monotone
    rearrangement (matched quantile levels) and the Lasry-Lions ('ll') or
    displacement ('disp') gap of V is evaluated.  Verdict passes when the
    minimum gap over pairs and checkpoints is >= -tolerance.
    """
    if kind not in ("ll", "disp"):
        raise SolverError("kind must be 'll' or 'disp'")
    config = config or ValueConfig()
    T = config.horizon
    checkpoints = np.asarray(
        np.linspace(0.0, T, 9) if checkpoints is None else checkpoints, dtype=float
    )
    levels = (np.arange(config.n_quantiles) + 0.5) / config.n_quantiles

    # common domain covering every pair
    means, stds = zip(*[_mu_stats(m) for pair in mu0_pairs for m in pair])
    lo = min(domain_for(mu, sd, config.allowance, config.spread)[0] for mu, sd in zip(means, stds))
    hi = max(domain_for(mu, sd, config.allowance, config.spread)[1] for mu, sd in zip(means, stds))
    cfg = replace(config, x_min=lo, x_max=hi)

    solve_cache = {}

    def flow_for(mu):
        ev = GridValue(rh, G, mu, cfg)
        density = _density_on(mu, ev.grid_for(0.0).xs, ev.bandwidth)
        key = density.values.tobytes()
        if key not in solve_cache:
            solve_cache[key] = ev.solve(0.0)
        return solve_cache[key]

    gaps = np.empty((len(mu0_pairs), checkpoints.size))
    for ip, (m1, m2) in enumerate(mu0_pairs):
        s1, s2 = flow_for(m1), flow_for(m2)
        grid = s1.grid
        for ic, t in enumerate(checkpoints):
            k = int(round((t - grid.t0) / grid.dt)) if grid.dt > 0 else 0
            k = min(max(k, 0), grid.n_t)
            x1 = ParticleEnsemble(s1.mu_density(k).quantiles(levels))
            x2 = ParticleEnsemble(s2.mu_density(k).quantiles(levels))
            table = {id(x1): s1, id(x2): s2}
            if kind == "ll":
                U = lambda pts, ens: CubicSpline(grid.xs, table[id(ens)].u[k])(pts[:, 0])
                gaps[ip, ic] = ll_gap_U(U, x1, x2)
            else:
                dxU = lambda pts, ens: CubicSpline(grid.xs, table[id(ens)].du[k])(pts[:, 0])[:, None]
                gaps[ip, ic] = disp_gap_U(dxU, lam, x1, x2)
    min_gap = float(gaps.min())
    verdict = "pass" if min_gap >= -tolerance else "fail"
    return PropagationReport(kind, checkpoints, gaps, min_gap, tolerance, verdict)


# ---------------------------------------------------------------------------
# Lipschitz-in-measure estimation
# ---------------------------------------------------------------------------


def lipschitz_estimate(
    order: int,
    rh: ReducedHamiltonian,
    G,
    measure_pairs,
    t0: float = 0.0,
    config: ValueConfig = None,
) -> dict:
    """sup_x |dxV(t0, x, mu1) - dxV(t0, x, mu2)| / W_order(mu1, mu2) per
    pair; returns {'ratios', 'max', 'median', 'skipped'}.  Pairs closer than
    1e-10 in W are skipped (0/0 guard).
    """
    if order not in (1, 2):
        raise SolverError("order must be 1 or 2")
    config = config or ValueConfig()
    means, stds = zip(*[_mu_stats(m) for pair in measure_pairs for m in pair])
    lo = min(domain_for(mu, sd, config.allowance, config.spread)[0] for mu, sd in zip(means, stds))
    hi = max(domain_for(mu, sd, config.allowance, config.spread)[1] for mu, sd in zip(means, stds))
    cfg = replace(config, x_min=lo, x_max=hi)

    cache = {}

    def du_slice(mu):
        ev = GridValue(rh, G, mu, cfg)
        grid = ev.grid_for(t0)
        density = _density_on(mu, grid.xs, ev.bandwidth)
        key = density.values.tobytes()
        if key not in cache:
            cache[key] = (ev.solve(t0).du[0], density)
        return cache[key]

    ratios = []
    skipped = 0
    for m1, m2 in measure_pairs:
        du1, d1 = du_slice(m1)
        du2, d2 = du_slice(m2)
        w = density_wasserstein(order, d1, d2)
        if w < 1e-10:
            skipped += 1
            continue
        ratios.append(float(np.max(np.abs(du1 - du2))) / w)
    ratios = np.asarray(ratios)
    return {
        "ratios": ratios,
        "max": float(ratios.max()) if ratios.size else float("nan"),
        "median": float(np.median(ratios)) if ratios.size else float("nan"),
        "skipped": skipped,
    }


# ---------------------------------------------------------------------------
# mixed state-measure derivative
# ---------------------------------------------------------------------------


def xmu_derivative_fd(q: ValueQuery, particle_index: int, coords=(0, 0)) -> float:
    """dxmuV(t0, x, mu0; xt_i): N-scaled central difference of the value
    gradient under a single-particle perturbation."""
    if not isinstance(q.mu0, ParticleEnsemble):
        raise SolverError("xmu_derivative_fd needs a particle ensemble mu0")
    if coords != (0, 0):
        raise SolverError("only d = 1 is supported")
    pts = q.mu0.points[:, 0].copy()
    n = pts.size
    if not 0 <= particle_index < n:
        raise SolverError("particle index out of range")
    ev = _evaluator(q)
    eps = q.config.fd_dmu
    h = q.config.fd_dx
    ev.solve(q.t0, ParticleEnsemble(pts), fixed=True)  # base for warm starts

    def grad_at(points):
        s = ev.slice(q.t0, ParticleEnsemble(points), fixed=True)
        return float((s(q.x + h) - s(q.x - h)) / (2 * h))

    plus = pts.copy()
    plus[particle_index] += eps
    minus = pts.copy()
    minus[particle_index] -= eps
    return n * (grad_at(plus) - grad_at(minus)) / (2 * eps)


# ---------------------------------------------------------------------------
# semigroup / continuation consistency
# ---------------------------------------------------------------------------


def semigroup_check(
    rh: ReducedHamiltonian,
    G,
    mu0,
    t0: float,
    t1: float,
    q_points,
    config: ValueConfig = None,
) -> float:
    """Continuation consistency: solve on [t0, T] directly; separately flow
    mu to t1 and solve on [t1, T]; return max |u_direct(t1, .) -
    u_twostage(t1, .)| over q_points."""
    config = config or ValueConfig()
    T = config.horizon
    if not t0 <= t1 <= T:
        raise SolverError("need t0 <= t1 <= horizon")
    ev = GridValue(rh, G, mu0, config)
    direct = ev.solve(t0)
    grid = direct.grid
    k1 = int(round((t1 - t0) / grid.dt)) if grid.dt > 0 else 0
    k1 = min(max(k1, 0), grid.n_t)
    if k1 == 0:
        return 0.0
    mu_t1 = direct.mu_density(k1)
    cfg2 = replace(config, n_t=max(2, grid.n_t - k1), x_min=grid.x_min, x_max=grid.x_max)
    ev2 = GridValue(rh, G, mu_t1, cfg2)
    second = ev2.solve(grid.ts[k1])
    q_points = np.asarray(q_points, dtype=float)
    u_direct = CubicSpline(grid.xs, direct.u[k1])(q_points)
    u_two = CubicSpline(second.grid.xs, second.u[0])(q_points)
    return float(np.max(np.abs(u_direct - u_two)))
