"""Mean field equilibrium solvers: a one-dimensional grid scheme coupling a
backward value equation with a forward density equation through per-step
joint-law fixed points, an outer fictitious-play loop, a particle
McKean-Vlasov solver with least-squares regression for the backward
component, and a Monte-Carlo best-response optimality check."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .hamiltonian import ReducedHamiltonian, fixed_point_law, hamiltonian_min_many
from .measures import DensityGrid1d, JointEnsemble, ParticleEnsemble, make_rng
from .models import JointLaw, StateLaw


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid on [x_min, x_max] x [t0, T]."""

    x_min: float
    x_max: float
    n_x: int
    t0: float
    horizon: float
    n_t: int

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise SolverError("x_max must exceed x_min")
        if self.n_x < 16:
            raise SolverError("need at least 16 spatial points")
        if self.n_t < 2:
            raise SolverError("need at least 2 time steps")
        if self.horizon < self.t0:
            raise SolverError("horizon must not precede t0")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / self.n_t

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def ts(self) -> np.ndarray:
        return np.linspace(self.t0, self.horizon, self.n_t + 1)


def domain_for(mean: float, std: float, allowance: float = 2.0, spread: float = 8.0):
    """Truncation interval: mean +/- (spread stddev + drift allowance)."""
    half = spread * std + allowance
    return mean - half, mean + half


@dataclass
class FlowSolution:
    """Grid equilibrium flow: value, gradient, density, momentum field and
    realized controls per time knot, with outer-loop diagnostics."""

    grid: GridSpec
    u: np.ndarray  # (n_t + 1, n_x)
    du: np.ndarray
    mu: np.ndarray  # densities per knot, trapezoid-normalized
    momenta: np.ndarray  # damped momentum field backing rho
    controls: np.ndarray  # fixed-point optimal controls on the grid
    drifts: np.ndarray  # dpH field driving the density
    residuals: list
    iterations: int
    converged: bool
    mass_drift_max: float = 0.0
    min_density: float = 0.0
    cfl: float = 0.0

    def mu_density(self, knot: int) -> DensityGrid1d:
        return DensityGrid1d(self.grid.xs, self.mu[knot])

    def rho_law(self, knot: int) -> JointLaw:
        w = _trapezoid_weights(self.mu[knot], self.grid.dx)
        return JointLaw.from_arrays(
            self.grid.xs[:, None], self.momenta[knot][:, None], w
        )

    def nu_law(self, knot: int) -> JointLaw:
        w = _trapezoid_weights(self.mu[knot], self.grid.dx)
        return JointLaw.from_arrays(
            self.grid.xs[:, None], self.controls[knot][:, None], w
        )

    def rho_ensemble(self, knot: int, n: int) -> JointEnsemble:
        pts = self.mu_density(knot).sample_ensemble(n).points
        mom = np.interp(pts[:, 0], self.grid.xs, self.momenta[knot])
        return JointEnsemble(np.hstack([pts, mom[:, None]]))

    def u_at(self, t: float, x) -> np.ndarray:
        return self._interp_time_slice(self.u, t, x)

    def du_at(self, t: float, x) -> np.ndarray:
        return self._interp_time_slice(self.du, t, x)

    def control_at(self, t: float, x) -> np.ndarray:
        return self._interp_time_slice(self.controls, t, x)

    def _interp_time_slice(self, table, t: float, x):
        from scipy.interpolate import CubicSpline

        ts = self.grid.ts
        i = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
        w = 0.0 if ts[i + 1] == ts[i] else (t - ts[i]) / (ts[i + 1] - ts[i])
        sl = (1 - w) * table[i] + w * table[i + 1]
        return CubicSpline(self.grid.xs, sl)(np.asarray(x, dtype=float))


def _trapezoid_weights(density, dx):
    w = np.asarray(density, dtype=float) * dx
    w[0] *= 0.5
    w[-1] *= 0.5
    s = w.sum()
    if s <= 0:
        raise SolverError("degenerate density (nonpositive mass)")
    return w / s


def _dx_field(u, dx):
    """Spatial gradient: central interior, zero at the zero-gradient walls."""
    g = np.zeros_like(u)
    g[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
    return g


def _cn_diffusion_bands(n, r):
    """Banded (ab) matrix for I - r*Lap with zero-gradient ghost closure,
    where Lap u = u'' * dx^2 (r carries all scaling)."""
    ab = np.zeros((3, n))
    ab[1, :] = 1 + 2 * r
    ab[0, 1:] = -r
    ab[2, :-1] = -r
    ab[0, 1] = -2 * r  # ghost fold at the left wall
    ab[2, -2] = -2 * r  # ghost fold at the right wall
    return ab


def _apply_explicit_diffusion(u, r):
    out = (1 - 2 * r) * u.copy()
    out[1:-1] += r * (u[2:] + u[:-2])
    out[0] += 2 * r * u[1]
    out[-1] += 2 * r * u[-2]
    return out


def solve_hjb_backward(rh: ReducedHamiltonian, rho_flow, terminal, grid: GridSpec):
    """Backward value sweep: implicit-explicit Crank-Nicolson on the
    half-Laplacian with a Heun predictor-corrector for the Hamiltonian
    source.  `rho_flow` supplies a JointLaw per time knot; `terminal` is the
    value at the horizon, an array on the grid or a callable of x.

    Returns (u, du) sampled on the space-time grid.
    """
    u, du, _ = _hjb_sweep(rh, rho_flow, terminal, grid)
    return u, du


def _hjb_sweep(rh: ReducedHamiltonian, rho_flow, terminal, grid: GridSpec):
    """Backward sweep returning (u, du, fixed-point controls per knot)."""
    xs = grid.xs
    n = grid.n_x
    dt, dx = grid.dt, grid.dx
    r = 0.25 * dt / dx**2  # CN half-step of the 1/2-coefficient diffusion
    ab = _cn_diffusion_bands(n, r)
    u = np.empty((grid.n_t + 1, n))
    du = np.empty_like(u)
    controls = np.empty_like(u)
    u[-1] = terminal(xs) if callable(terminal) else np.asarray(terminal, dtype=float)
    if not np.all(np.isfinite(u[-1])):
        raise SolverError("non-finite terminal data")

    nustars = [None] * (grid.n_t + 1)
    warm = None

    def nustar(k):
        if nustars[k] is None:
            nonlocal warm
            nu, a, _, _ = fixed_point_law(rh, rho_flow[k], a0=warm, accelerate=True)
            warm = a
            nustars[k] = nu
        return nustars[k]

    xcol = xs[:, None]
    a_warm = None
    for k in range(grid.n_t - 1, -1, -1):
        p_next = _dx_field(u[k + 1], dx)
        h_next, a_next = hamiltonian_min_many(rh, xcol, p_next[:, None], nustar(k + 1), a0=a_warm)
        a_warm = a_next
        rhs = _apply_explicit_diffusion(u[k + 1], r)
        u_pred = solve_banded((1, 1), ab, rhs + dt * h_next)
        p_here = _dx_field(u_pred, dx)
        h_here, a_here = hamiltonian_min_many(rh, xcol, p_here[:, None], nustar(k), a0=a_warm)
        a_warm = a_here
        u[k] = solve_banded((1, 1), ab, rhs + dt * 0.5 * (h_next + h_here))
        if not np.all(np.isfinite(u[k])):
            raise SolverError("value blow-up: enlarge the domain or refine the grid")
        du[k] = _dx_field(u[k], dx)
        controls[k] = a_here[:, 0]
    du[-1] = _dx_field(u[-1], dx)
    _, a_T = hamiltonian_min_many(rh, xcol, du[-1][:, None], nustar(grid.n_t), a0=a_warm)
    controls[-1] = a_T[:, 0]
    return u, du, controls


def _chang_cooper_bands(v_faces, dx, dt_half):
    """Tridiagonal update bands for the conservative drift-diffusion flux
    with exponential fitting:  F = v*((1-delta) m_L + delta m_R) - D (m_R -
    m_L)/dx on each interior face, D = 1/2, zero flux at the walls.

    Returns (lower, diag, upper) of the operator A with dm/dt = A m,
    scaled by dt_half.
    """
    D = 0.5
    w = v_faces * dx / D
    small = np.abs(w) < 1e-8
    delta = np.where(small, 0.5 - w / 12.0, 1.0 / np.where(small, 1.0, w) - 1.0 / np.expm1(np.where(small, 1.0, w)))
    # face coefficients: F_j = c_L[j] * m_j - c_R[j] * m_{j+1}
    c_left = v_faces * (1 - delta) + D / dx
    c_right = -v_faces * delta + D / dx
    n = v_faces.size + 1
    lower = np.zeros(n)
    diag = np.zeros(n)
    upper = np.zeros(n)
    # divergence: dm_i/dt = (F_{i-1/2} - F_{i+1/2}) / dx
    diag[:-1] -= c_left / dx
    upper[:-1] += c_right / dx
    diag[1:] -= c_right / dx
    lower[1:] += c_left / dx
    return lower * dt_half, diag * dt_half, upper * dt_half


def drift_and_controls(rh: ReducedHamiltonian, du, rho_flow, grid: GridSpec):
    """Per-knot transport velocity dpH(x, du, rho) by the envelope identity
    dpH = b(x, a*, nu*), with the joint-law fixed point solved at the
    momenta du.  Returns (drifts, controls), each (n_t + 1, n_x)."""
    xs = grid.xs
    drifts = np.empty((grid.n_t + 1, grid.n_x))
    controls = np.empty_like(drifts)
    warm = None
    for k in range(grid.n_t + 1):
        law = rho_flow[k].with_seconds(du[k][:, None])
        nu, a, _, _ = fixed_point_law(rh, law, a0=warm, accelerate=True)
        warm = a
        drifts[k] = rh.model.b(xs[:, None], a, nu)[:, 0]
        controls[k] = a[:, 0]
    return drifts, controls


def solve_fp_forward(rh: ReducedHamiltonian, du, rho_flow, mu0, grid: GridSpec):
    """Forward density sweep under the transport velocity dpH(x, du, rho):
    Crank-Nicolson in time over the exponentially fitted conservative flux,
    zero-flux walls, per-step renormalization.

    `mu0` is a DensityGrid1d on the solver grid (or values on it).  Returns
    the (n_t + 1, n_x) density table.
    """
    drifts, _ = drift_and_controls(rh, du, rho_flow, grid)
    mu0_vals = mu0.values if isinstance(mu0, DensityGrid1d) else np.asarray(mu0, dtype=float)
    mu, _, _, _ = _advect_density(drifts, mu0_vals, grid)
    return mu


def _advect_density(drifts, mu0_values, grid: GridSpec):
    """Density transport core.  `drifts` is the (n_t + 1, n_x) velocity
    field.  Returns (mu, mass_drift_max, min_density, cfl)."""
    xs = grid.xs
    n = grid.n_x
    dt, dx = grid.dt, grid.dx
    mu = np.empty((grid.n_t + 1, n))
    m = np.asarray(mu0_values, dtype=float)
    m = m / np.trapezoid(m, xs)
    mu[0] = m
    mass_drift = 0.0
    min_density = 0.0
    half = 0.5 * dt

    def bands(k):
        v_faces = 0.5 * (drifts[k][1:] + drifts[k][:-1])
        return _chang_cooper_bands(v_faces, dx, half)

    lo_n, di_n, up_n = bands(0)
    for k in range(grid.n_t):
        lo_o, di_o, up_o = lo_n, di_n, up_n
        lo_n, di_n, up_n = bands(k + 1)
        # rhs = (I + (dt/2) A_old) m
        rhs = (1 + di_o) * m
        rhs[:-1] += up_o[:-1] * m[1:]
        rhs[1:] += lo_o[1:] * m[:-1]
        ab = np.zeros((3, n))
        ab[1] = 1 - di_n
        ab[0, 1:] = -up_n[:-1]
        ab[2, :-1] = -lo_n[1:]
        m = solve_banded((1, 1), ab, rhs)
        min_density = min(min_density, float(m.min()))
        if m.min() < -1e-9:
            raise SolverError("negative density beyond tolerance: refine the time grid")
        m = np.clip(m, 0.0, None)
        mass = np.trapezoid(m, xs)
        mass_drift = max(mass_drift, abs(mass - 1.0))
        m = m / mass
        mu[k + 1] = m
    cfl = float(np.max(np.abs(drifts)) * dt / dx)
    return mu, mass_drift, min_density, cfl


@dataclass
class PicardConfig:
    theta_out: float = 0.5
    max_outer: int = 50
    tol_out: float = 1e-7
    residual_quantiles: int = 64

    def __post_init__(self):
        if not 0.0 < self.theta_out <= 1.0:
            raise SolverError("fictitious-play weight must lie in (0, 1]")


def _flow_residual(grid, mu_new, mu_old, p_new, p_old, n_q):
    """sup over knots of sqrt(W2(mu)^2 + integral of |dp|^2 dmu_new): an
    upper proxy for the joint-law flow distance."""
    levels = (np.arange(n_q) + 0.5) / n_q
    worst = 0.0
    for k in range(mu_new.shape[0]):
        d_new = DensityGrid1d(grid.xs, mu_new[k])
        d_old = DensityGrid1d(grid.xs, mu_old[k])
        w2sq = float(np.mean((d_new.quantiles(levels) - d_old.quantiles(levels)) ** 2))
        dp2 = float(np.trapezoid(mu_new[k] * (p_new[k] - p_old[k]) ** 2, grid.xs))
        worst = max(worst, np.sqrt(w2sq + dp2))
    return worst


def _terminal_values(G, xs, density_values):
    """Evaluate a terminal cost with the model callback convention
    ((N, d) points, StateLaw) on a grid density; returns a flat array."""
    from .models import StateLaw

    law = StateLaw.from_density(DensityGrid1d(xs, density_values))
    return np.asarray(G(xs[:, None], law), dtype=float).reshape(xs.size)


def equilibrium_picard(
    rh: ReducedHamiltonian,
    G,
    mu0: DensityGrid1d,
    grid: GridSpec,
    config: PicardConfig = None,
    init: FlowSolution = None,
    n_outer: int = None,
) -> FlowSolution:
    """Outer fictitious-play loop: backward value sweep against the current
    joint-law flow, forward density sweep under the resulting gradient, and
    damped update of the momentum coordinate of the flow.

    `G` is the terminal cost with the model callback convention: it
    receives (N, d) grid points and a StateLaw built from the terminal
    density.  `init` warm-starts the loop from a previous solution on the
    same grid (FD stencils over nearby data reuse it).  `n_outer` forces an
    exact iteration count with no early stop, so a family of perturbed
    solves follows the same arithmetic path — tolerance-triggered stopping
    would put iteration-count jumps inside finite differences.  The initial
    flow guess otherwise comes from a bootstrap
    sweep (drift-free density, zero momenta) that is not counted.
    """
    config = config or PicardConfig()
    if n_outer is not None and n_outer < 1:
        raise SolverError("n_outer must be at least 1")
    xs = grid.xs
    mu0_vals = DensityGrid1d(xs, np.interp(xs, mu0.x_grid, mu0.values, left=0.0, right=0.0)).values \
        if not np.array_equal(mu0.x_grid, xs) else mu0.values
    if grid.horizon == grid.t0:
        uT = _terminal_values(G, xs, mu0_vals)
        flat = np.tile(uT, (grid.n_t + 1, 1))
        dflat = np.tile(_dx_field(uT, grid.dx), (grid.n_t + 1, 1))
        mus = np.tile(mu0_vals, (grid.n_t + 1, 1))
        zero = np.zeros_like(flat)
        return FlowSolution(grid, flat, dflat, mus, dflat.copy(), zero, zero, [], 0, True)

    def rho_laws(mu, momenta):
        return [
            JointLaw.from_arrays(xs[:, None], momenta[k][:, None], _trapezoid_weights(mu[k], grid.dx))
            for k in range(grid.n_t + 1)
        ]

    def sweep(mu_in, p_in):
        rho = rho_laws(mu_in, p_in)
        terminal = _terminal_values(G, xs, mu_in[-1])
        u, du, _ = _hjb_sweep(rh, rho, terminal, grid)
        drifts, controls = drift_and_controls(rh, du, rho, grid)
        mu, mass_drift, min_density, cfl = _advect_density(drifts, mu0_vals, grid)
        return u, du, controls, drifts, mu, mass_drift, min_density, cfl

    if init is not None:
        mu = init.mu
        momenta = init.momenta
        mass_drift = 0.0
        min_density = 0.0
        cfl = 0.0
    else:
        # bootstrap: drift-free density flow and zero momenta
        mu_b, _, _, _ = _advect_density(np.zeros((grid.n_t + 1, grid.n_x)), mu0_vals, grid)
        out = sweep(mu_b, np.zeros((grid.n_t + 1, grid.n_x)))
        u, du, controls, drifts, mu, mass_drift, min_density, cfl = out
        momenta = du.copy()
    residuals = []
    converged = False
    iterations = 0
    total = config.max_outer if n_outer is None else n_outer
    for it in range(1, total + 1):
        iterations = it
        mu_prev, p_prev = mu, momenta
        u, du, controls, drifts, mu_new, md, mind, cfl = sweep(mu_prev, p_prev)
        mass_drift = max(mass_drift, md)
        min_density = min(min_density, mind)
        res = _flow_residual(grid, mu_new, mu_prev, du, p_prev, config.residual_quantiles)
        residuals.append(res)
        momenta = config.theta_out * du + (1 - config.theta_out) * p_prev
        mu = mu_new
        if res <= config.tol_out and n_outer is None:
            converged = True
            momenta = du.copy()
            break
    if n_outer is not None:
        converged = bool(residuals and residuals[-1] <= config.tol_out)
        momenta = du.copy()
    # pin the terminal condition to the final density, exactly
    u[-1] = _terminal_values(G, xs, mu[-1])
    du[-1] = _dx_field(u[-1], grid.dx)
    return FlowSolution(
        grid,
        u,
        du,
        mu,
        momenta,
        controls,
        drifts,
        residuals,
        iterations,
        converged,
        mass_drift,
        min_density,
        cfl,
    )


# ---------------------------------------------------------------------------
# particle McKean-Vlasov solver
# ---------------------------------------------------------------------------


@dataclass
class ParticleConfig:
    reg_degree: int = 3
    max_picard: int = 30
    tol_out: float = 1e-3
    damping: float = 1.0


@dataclass
class ParticlePaths:
    ts: np.ndarray
    X: np.ndarray  # (n_t + 1, N)
    Y: np.ndarray  # decoupling-field values along paths (gradient process)
    controls: np.ndarray
    beta: float
    seed: int
    common_seed: int
    iterations: int
    converged: bool
    residuals: list = field(default_factory=list)

    def state_ensemble(self, knot: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.X[knot][:, None])


def _poly_features(x, degree):
    return np.vander(x, degree + 1, increasing=True)


def _regress(x, y, degree):
    A = _poly_features(x, degree)
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < degree + 1:
        raise SolverError("regression basis rank-deficient: degenerate particle spread")
    return coef


def solve_particle_fbsde(
    rh: ReducedHamiltonian,
    dxG,
    xi0: ParticleEnsemble,
    grid: GridSpec,
    beta: float = 0.0,
    seed: int = 0,
    config: ParticleConfig = None,
) -> ParticlePaths:
    """Forward-backward particle iteration: simulate states under the
    current polynomial decoupling field, regress the gradient process
    backward on polynomial features, repeat until the state flow stops
    moving.  One common-noise path per run when beta > 0.

    `dxG` maps ((N, d) points, terminal StateLaw) to the terminal gradient,
    matching the model callback convention.
    """
    config = config or ParticleConfig()
    n = len(xi0)
    nt = grid.n_t
    dt = grid.dt
    ts = grid.ts
    x0 = xi0.points[:, 0]
    rng = make_rng(seed, stream=7)
    noise = rng.normal(size=(nt, n)) * np.sqrt(dt)
    common = make_rng(seed, stream=8).normal(size=nt) * np.sqrt(dt)

    deg = min(config.reg_degree, n - 1)  # a cloud of n points pins degree n-1
    coefs = np.zeros((nt + 1, deg + 1))
    X = np.tile(x0, (nt + 1, 1))
    controls = np.zeros((nt + 1, n))
    Y = np.zeros((nt + 1, n))
    residuals = []
    converged = False
    iterations = 0
    dx_h = rh.model.dx_h

    for it in range(1, config.max_picard + 1):
        iterations = it
        X_prev = X.copy()
        # forward pass under the current decoupling field
        X = np.empty((nt + 1, n))
        Y = np.empty((nt + 1, n))
        controls = np.empty((nt + 1, n))
        nus = [None] * (nt + 1)
        X[0] = x0
        warm = None
        for k in range(nt):
            p = _poly_features(X[k], deg) @ coefs[k]
            Y[k] = p
            law = JointLaw.from_arrays(X[k][:, None], p[:, None])
            nu, a, _, _ = fixed_point_law(rh, law, a0=warm, accelerate=True)
            warm = a
            nus[k] = nu
            controls[k] = a[:, 0]
            drift = rh.model.b(X[k][:, None], a, nu)[:, 0]
            X[k + 1] = X[k] + drift * dt + noise[k] + beta * common[k]
        # terminal data and backward regression of the gradient process
        terminal_law = StateLaw.from_arrays(X[nt][:, None])
        Y[nt] = np.asarray(dxG(X[nt][:, None], terminal_law), dtype=float).reshape(n)
        p = Y[nt]
        law = JointLaw.from_arrays(X[nt][:, None], p[:, None])
        nu, a, _, _ = fixed_point_law(rh, law, a0=warm, accelerate=True)
        nus[nt] = nu
        controls[nt] = a[:, 0]
        new_coefs = np.zeros_like(coefs)
        new_coefs[nt] = _regress(X[nt], Y[nt], deg)
        target = Y[nt]
        for k in range(nt - 1, -1, -1):
            if dx_h is not None:
                dxH = dx_h(
                    X[k + 1][:, None], Y[k + 1][:, None], controls[k + 1][:, None], nus[k + 1]
                )[:, 0]
            else:
                dxH = _fd_dx_h(rh, X[k + 1], Y[k + 1], nus[k + 1])
            target = target + dt * dxH
            new_coefs[k] = _regress(X[k], target, deg)
        coefs = config.damping * new_coefs + (1 - config.damping) * coefs
        res = float(np.sqrt(np.mean((X - X_prev) ** 2)))
        residuals.append(res)
        if it > 1 and res <= config.tol_out:
            converged = True
            break
    return ParticlePaths(
        ts, X, Y, controls, beta, seed, seed, iterations, converged, residuals
    )


def _fd_dx_h(rh, x, p, nu, eps=1e-5):
    hp, _ = hamiltonian_min_many(rh, (x + eps)[:, None], p[:, None], nu)
    hm, _ = hamiltonian_min_many(rh, (x - eps)[:, None], p[:, None], nu)
    return (hp - hm) / (2 * eps)


def pooled_moments(runs):
    """Mean and variance of terminal states pooled across runs (e.g. across
    common-noise paths for unconditional statistics)."""
    xs = np.concatenate([r.X[-1] for r in runs])
    return float(np.mean(xs)), float(np.var(xs))


# ---------------------------------------------------------------------------
# best-response optimality check
# ---------------------------------------------------------------------------


@dataclass
class McConfig:
    n_paths: int = 20000
    seed: int = 0


def best_response_gap(rh: ReducedHamiltonian, flow, perturbation, config: McConfig = None):
    """Monte-Carlo cost difference J(alpha* + w) - J(alpha*) against the
    frozen equilibrium flow (FlowSolution or ParticlePaths); common random
    numbers across the two arms.

    `perturbation` maps (t, x array) to a control offset.  Returns
    (gap, standard_error); the gap should be nonnegative up to Monte-Carlo
    error when the flow is an equilibrium.
    """
    config = config or McConfig()
    if isinstance(flow, FlowSolution):
        grid = flow.grid
        ts, nt, dt = grid.ts, grid.n_t, grid.dt
        x0 = flow.mu_density(0).sample_ensemble(config.n_paths).points[:, 0]
        nus = [flow.nu_law(k) for k in range(nt + 1)]

        def control_interp(k, x):
            return np.interp(x, grid.xs, flow.controls[k])

        def terminal_cost(x):
            return np.interp(x, grid.xs, flow.u[-1])
    elif isinstance(flow, ParticlePaths):
        ts = flow.ts
        nt = ts.size - 1
        dt = float(ts[1] - ts[0])
        idx = make_rng(config.seed, stream=12).integers(0, flow.X.shape[1], size=config.n_paths)
        x0 = flow.X[0][idx]
        nus = [
            JointLaw.from_arrays(flow.X[k][:, None], flow.controls[k][:, None])
            for k in range(nt + 1)
        ]
        orders = [np.argsort(flow.X[k]) for k in range(nt + 1)]

        def control_interp(k, x):
            o = orders[k]
            return np.interp(x, flow.X[k][o], flow.controls[k][o])

        terminal_law = StateLaw.from_arrays(flow.X[-1][:, None])

        def terminal_cost(x):
            return np.asarray(rh.model.G(x[:, None], terminal_law), dtype=float)
    else:
        raise SolverError("flow must be a FlowSolution or ParticlePaths")

    rng = make_rng(config.seed, stream=11)
    noise = rng.normal(size=(nt, config.n_paths)) * np.sqrt(dt)

    def run(perturb):
        x = x0.copy()
        cost = np.zeros_like(x)
        for k in range(nt):
            a = control_interp(k, x)
            if perturb is not None:
                a = a + perturb(ts[k], x)
            cost += rh.model.f(x[:, None], a[:, None], nus[k]) * dt
            drift = rh.model.b(x[:, None], a[:, None], nus[k])[:, 0]
            x = x + drift * dt + noise[k]
        cost += terminal_cost(x)
        return cost

    base = run(None)
    pert = run(perturbation)
    diff = pert - base
    gap = float(np.mean(diff))
    se = float(np.std(diff, ddof=1) / np.sqrt(config.n_paths))
    return gap, se
