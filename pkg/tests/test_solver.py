"""Grid and particle equilibrium solver tests against the Riccati reference
and closed-form moment identities."""

import numpy as np
import pytest

from mfgc_lab.hamiltonian import ReducedHamiltonian
from mfgc_lab.lq_reference import LQReference
from mfgc_lab.measures import ParticleEnsemble, gaussian_density, make_rng, wasserstein
from mfgc_lab.models import JointLaw, StateLaw, lq_model, zero_drift_model
from mfgc_lab.solver import (
    GridSpec,
    McConfig,
    ParticleConfig,
    PicardConfig,
    SolverError,
    best_response_gap,
    domain_for,
    equilibrium_picard,
    solve_fp_forward,
    solve_hjb_backward,
    solve_particle_fbsde,
)


def _grid(nx=200, nt=200, mean=0.0, std=1.0, horizon=1.0):
    return GridSpec(*domain_for(mean, std), nx, 0.0, horizon, nt)


def _rho_flow(grid, momenta=None):
    """Flat-density joint-law flow with the given per-knot momenta."""
    xs = grid.xs
    if momenta is None:
        momenta = np.zeros((grid.n_t + 1, grid.n_x))
    return [
        JointLaw.from_arrays(xs[:, None], momenta[k][:, None])
        for k in range(grid.n_t + 1)
    ]


# ---------------------------------------------------------------------------
# backward value sweep
# ---------------------------------------------------------------------------


def test_hjb_zero_hamiltonian_preserves_linear_profile():
    # the discrete diffusion is exact on linear data away from the walls
    m = zero_drift_model(g=1.0)
    rh = ReducedHamiltonian(m)
    grid = _grid(nx=128, nt=64)
    u, du = solve_hjb_backward(rh, _rho_flow(grid), lambda x: x, grid)
    xs = grid.xs
    # the zero-gradient wall bends the profile in a boundary layer of width
    # ~sqrt(horizon); measure well inside it
    interior = (xs > grid.x_min + 5) & (xs < grid.x_max - 5)
    for k in range(0, grid.n_t + 1, 16):
        assert np.max(np.abs(u[k][interior] - xs[interior])) < 1e-4
        assert np.max(np.abs(du[k][interior] - 1.0)) < 1e-4


def test_hjb_matches_riccati_reference_on_oracle_flow():
    m = lq_model()
    rh = ReducedHamiltonian(m)
    ref = LQReference(m)
    m0, v0 = 0.5, 1.0
    grid = GridSpec(*domain_for(m0, np.sqrt(v0)), 400, 0.0, 1.0, 2000)
    xs = grid.xs
    means = np.array([ref.mean_flow(m0, t) for t in grid.ts])
    momenta = np.array([ref.A(t) * xs + ref.B(t) * mt for t, mt in zip(grid.ts, means)])
    variances = np.array([ref.variance_flow(v0, t) for t in grid.ts])
    rho = [
        JointLaw.from_arrays(
            xs[:, None],
            momenta[k][:, None],
            gaussian_density(means[k], np.sqrt(variances[k]), xs).values,
        )
        for k in range(grid.n_t + 1)
    ]
    terminal_law = StateLaw.from_density(gaussian_density(means[-1], np.sqrt(variances[-1]), xs))
    u, du = solve_hjb_backward(rh, rho, m.G(xs[:, None], terminal_law), grid)
    win = (xs > m0 - 3) & (xs < m0 + 3)
    err_u = err_du = 0.0
    for k in range(0, grid.n_t + 1, 200):
        t = grid.ts[k]
        u_ref = np.array([ref.u(t, x, means[k]) for x in xs[win]])
        du_ref = ref.A(t) * xs[win] + ref.B(t) * means[k]
        err_u = max(err_u, np.max(np.abs(u[k][win] - u_ref)))
        err_du = max(err_du, np.max(np.abs(du[k][win] - du_ref)))
    assert err_u <= 5e-3
    assert err_du <= 5e-3


def test_hjb_zero_horizon_returns_terminal_data():
    m = lq_model()
    rh = ReducedHamiltonian(m)
    grid = GridSpec(-10.0, 10.0, 64, 1.0, 1.0, 4)
    terminal = np.sin(grid.xs)
    u, _ = solve_hjb_backward(rh, _rho_flow(grid), terminal, grid)
    for k in range(grid.n_t + 1):
        assert np.array_equal(u[k], terminal)


def test_hjb_rejects_non_finite_terminal():
    m = lq_model()
    rh = ReducedHamiltonian(m)
    grid = _grid(nx=32, nt=4)
    bad = np.full(grid.n_x, np.nan)
    with pytest.raises(SolverError):
        solve_hjb_backward(rh, _rho_flow(grid), bad, grid)


# ---------------------------------------------------------------------------
# forward density sweep
# ---------------------------------------------------------------------------


def test_fp_zero_drift_variance_grows_linearly():
    m = zero_drift_model()
    rh = ReducedHamiltonian(m)
    grid = GridSpec(-8.0, 8.0, 321, 0.0, 0.5, 100)
    mu0 = gaussian_density(0.0, 1.0, grid.xs)
    mu = solve_fp_forward(rh, np.zeros((grid.n_t + 1, grid.n_x)), _rho_flow(grid), mu0, grid)
    xs = grid.xs
    for k in (25, 50, 100):
        t = grid.ts[k]
        var = np.trapezoid(mu[k] * xs**2, xs) - np.trapezoid(mu[k] * xs, xs) ** 2
        assert abs(var - (1.0 + t)) < 1e-4  # within O(dx^2)


def test_fp_odd_drift_keeps_mean_zero():
    # drift = -du is odd when du = x; a symmetric density stays symmetric
    m = lq_model(k=0.0, q=0.0, r=0.0, g=1.0, s=0.0)
    rh = ReducedHamiltonian(m)
    grid = GridSpec(-8.0, 8.0, 257, 0.0, 0.5, 100)
    mu0 = gaussian_density(0.0, 1.0, grid.xs)
    du = np.tile(grid.xs, (grid.n_t + 1, 1))
    mu = solve_fp_forward(rh, du, _rho_flow(grid, du), mu0, grid)
    for k in range(0, grid.n_t + 1, 20):
        assert abs(np.trapezoid(mu[k] * grid.xs, grid.xs)) < 1e-10


def test_fp_mass_conserved_over_thousand_steps():
    m = lq_model(k=0.0, q=0.0, r=0.0, g=1.0, s=0.0)
    rh = ReducedHamiltonian(m)
    grid = GridSpec(-10.0, 10.0, 201, 0.0, 1.0, 1000)
    mu0 = gaussian_density(0.0, 1.0, grid.xs)
    du = np.tile(0.3 * grid.xs, (grid.n_t + 1, 1))
    mu = solve_fp_forward(rh, du, _rho_flow(grid, du), mu0, grid)
    for k in range(0, grid.n_t + 1, 100):
        assert abs(np.trapezoid(mu[k], grid.xs) - 1.0) <= 1e-8
        assert np.all(mu[k] >= 0.0)


# ---------------------------------------------------------------------------
# outer equilibrium loop
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def coupled_flow():
    m = lq_model()
    rh = ReducedHamiltonian(m)
    grid = GridSpec(*domain_for(0.5, 1.0), 200, 0.0, 1.0, 400)
    mu0 = gaussian_density(0.5, 1.0, grid.xs)
    sol = equilibrium_picard(rh, m.G, mu0, grid, PicardConfig(theta_out=0.5))
    return m, rh, grid, sol


def test_picard_decoupled_converges_in_one_iteration():
    m = lq_model(k=0.0, q=0.2, r=0.0, g=0.5, s=0.0)
    rh = ReducedHamiltonian(m)
    grid = _grid(nx=128, nt=64)
    mu0 = gaussian_density(0.0, 1.0, grid.xs)
    sol = equilibrium_picard(rh, m.G, mu0, grid)
    assert sol.converged
    assert sol.iterations == 1


def test_picard_coupled_converges(coupled_flow):
    _, _, _, sol = coupled_flow
    assert sol.converged
    assert sol.iterations <= 50
    assert sol.residuals[-1] <= 1e-6


def test_picard_coupled_matches_riccati_moments(coupled_flow):
    m, _, grid, sol = coupled_flow
    ref = LQReference(m)
    xs = grid.xs
    for k in range(0, grid.n_t + 1, 50):
        t = grid.ts[k]
        mean = np.trapezoid(sol.mu[k] * xs, xs)
        var = np.trapezoid(sol.mu[k] * (xs - mean) ** 2, xs)
        assert abs(mean - ref.mean_flow(0.5, t)) <= 1e-3
        assert abs(var - ref.variance_flow(1.0, t)) <= 1e-3


def test_picard_coupled_value_matches_riccati(coupled_flow):
    m, _, grid, sol = coupled_flow
    ref = LQReference(m)
    xs = grid.xs
    win = (xs > 0.5 - 3) & (xs < 0.5 + 3)
    for k in range(0, grid.n_t + 1, 100):
        t = grid.ts[k]
        mt = ref.mean_flow(0.5, t)
        u_ref = np.array([ref.u(t, x, mt) for x in xs[win]])
        assert np.max(np.abs(sol.u[k][win] - u_ref)) <= 5e-3


def test_picard_residuals_eventually_monotone(coupled_flow):
    _, _, _, sol = coupled_flow
    tail = sol.residuals[3:]
    violations = sum(1 for a, b in zip(tail, tail[1:]) if b > a)
    assert violations <= 1


def test_picard_terminal_condition_bitwise(coupled_flow):
    m, _, grid, sol = coupled_flow
    law = StateLaw.from_density(sol.mu_density(grid.n_t))
    expected = m.G(grid.xs[:, None], law)
    assert np.array_equal(sol.u[-1], expected)


def test_picard_flow_invariants(coupled_flow):
    _, _, grid, sol = coupled_flow
    assert sol.mass_drift_max <= 1e-8
    assert sol.min_density >= -1e-12
    for k in (0, grid.n_t // 2, grid.n_t):
        rho = sol.rho_law(k)
        # quantile projection of rho's weighted first marginal
        quantile_cloud = np.interp(
            (np.arange(512) + 0.5) / 512, np.cumsum(rho.weights), rho.states[:, 0]
        )
        proj = sol.mu_density(k).sample_ensemble(512)
        assert wasserstein(2, ParticleEnsemble(quantile_cloud), proj) <= grid.dx


def test_picard_empty_horizon_returns_initial_data():
    m = lq_model()
    rh = ReducedHamiltonian(m)
    grid = GridSpec(-10.0, 10.0, 64, 1.0, 1.0, 4)
    mu0 = gaussian_density(0.0, 1.0, grid.xs)
    sol = equilibrium_picard(rh, m.G, mu0, grid)
    assert sol.converged
    law = StateLaw.from_density(mu0)
    assert np.array_equal(sol.u[0], m.G(grid.xs[:, None], law))
    assert np.allclose(sol.mu[0], mu0.values, rtol=1e-14)


def test_grid_convergence_order_at_least_one():
    m = lq_model()
    rh = ReducedHamiltonian(m)
    ref = LQReference(m)

    def run(nx, nt):
        grid = GridSpec(*domain_for(0.0, 1.0), nx, 0.0, 1.0, nt)
        mu0 = gaussian_density(0.0, 1.0, grid.xs)
        sol = equilibrium_picard(rh, m.G, mu0, grid)
        xs = grid.xs
        win = (xs > -3) & (xs < 3)
        err = 0.0
        for k in range(0, grid.n_t + 1, max(1, grid.n_t // 8)):
            t = grid.ts[k]
            u_ref = np.array([ref.u(t, x, 0.0) for x in xs[win]])
            err = max(err, np.max(np.abs(sol.u[k][win] - u_ref)))
        return err, sol

    err_coarse, _ = run(100, 125)
    err_fine, sol_fine = run(200, 500)
    order = np.log2(err_coarse / err_fine)
    assert order >= 1.0
    # gradient and curvature stay bounded across the refinement
    dfine = np.max(np.abs(sol_fine.du))
    assert np.isfinite(dfine)


# ---------------------------------------------------------------------------
# particle solver
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def particle_run():
    m = lq_model()
    rh = ReducedHamiltonian(m)
    n = 20000
    x0 = make_rng(42).normal(0.5, 1.0, size=n)
    grid = GridSpec(*domain_for(0.5, 1.0), 64, 0.0, 1.0, 100)
    paths = solve_particle_fbsde(rh, m.dxG, ParticleEnsemble(x0), grid, beta=0.0, seed=1)
    return m, rh, x0, paths


def test_particle_moments_match_reference(particle_run):
    m, _, x0, paths = particle_run
    assert paths.converged
    ref = LQReference(m)
    n = x0.size
    xT = paths.X[-1]
    mean, var = float(np.mean(xT)), float(np.var(xT))
    mean_ref = ref.mean_flow(float(np.mean(x0)), 1.0)
    var_ref = ref.variance_flow(float(np.var(x0)), 1.0)
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / n)
    assert abs(mean - mean_ref) <= 3 * se_mean
    assert abs(var - var_ref) <= 3 * se_var


def test_particle_terminal_condition(particle_run):
    m, _, _, paths = particle_run
    law = StateLaw.from_arrays(paths.X[-1][:, None])
    expected = m.dxG(paths.X[-1][:, None], law)[:, 0]
    assert np.max(np.abs(paths.Y[-1] - expected)) <= 1e-10


def test_particle_vs_grid_density_agreement(particle_run):
    m, rh, _, paths = particle_run
    grid = GridSpec(*domain_for(0.5, 1.0), 400, 0.0, 1.0, 400)
    mu0 = gaussian_density(0.5, 1.0, grid.xs)
    sol = equilibrium_picard(rh, m.G, mu0, grid, PicardConfig(theta_out=0.5))
    for frac in (0.5, 1.0):
        k_p = int(frac * (paths.ts.size - 1))
        k_g = int(frac * grid.n_t)
        cloud = paths.state_ensemble(k_p)
        grid_cloud = sol.mu_density(k_g).sample_ensemble(len(cloud))
        assert wasserstein(2, cloud, grid_cloud) <= 5e-2


def test_particle_brownian_variance_with_common_noise():
    beta = 0.7
    m = zero_drift_model(beta=beta)
    rh = ReducedHamiltonian(m)
    n_paths, n_common = 4000, 40
    grid = GridSpec(-12.0, 12.0, 64, 0.0, 1.0, 50)
    # pool terminal states across common-noise paths for the unconditional law
    xs = []
    for j in range(n_common):
        x0 = make_rng(100 + j).normal(0.0, 1.0, size=n_paths)
        paths = solve_particle_fbsde(
            rh, m.dxG, ParticleEnsemble(x0), grid, beta=beta, seed=200 + j,
            config=ParticleConfig(max_picard=3, tol_out=np.inf),
        )
        xs.append(paths.X[-1])
    xT = np.concatenate(xs)
    var = float(np.var(xT))
    target = 1.0 + (1.0 + beta**2) * 1.0
    # effective sample size for the variance is limited by the common paths
    se = target * np.sqrt(2.0 / n_common)
    assert abs(var - target) <= 3 * se


def test_particle_single_particle_constant_gradient():
    slope = 0.7
    m = zero_drift_model(g=slope)
    rh = ReducedHamiltonian(m)
    grid = GridSpec(-10.0, 10.0, 32, 0.0, 1.0, 20)
    paths = solve_particle_fbsde(rh, m.dxG, ParticleEnsemble([0.3]), grid, seed=3)
    assert paths.converged
    assert np.allclose(paths.Y, slope, atol=1e-12)


# ---------------------------------------------------------------------------
# best-response optimality
# ---------------------------------------------------------------------------


def test_best_response_zero_perturbation_is_exactly_zero(coupled_flow):
    _, rh, _, sol = coupled_flow
    gap, se = best_response_gap(rh, sol, lambda t, x: np.zeros_like(x), McConfig(2000))
    assert gap == 0.0
    assert se == 0.0


def test_best_response_constant_perturbation_quadratic_cost(coupled_flow):
    _, rh, _, sol = coupled_flow
    gap, se = best_response_gap(
        rh, sol, lambda t, x: 0.1 * np.ones_like(x), McConfig(20000)
    )
    expected = 0.5 * 0.1**2 * 1.0
    assert gap > 0
    assert abs(gap - expected) <= 3 * se + 5e-4  # MC error + time discretization


def test_best_response_quadratic_scaling(coupled_flow):
    _, rh, _, sol = coupled_flow
    eps = np.array([0.05, 0.1, 0.2])
    gaps = np.array(
        [
            best_response_gap(
                rh, sol, lambda t, x, e=e: e * np.ones_like(x), McConfig(20000)
            )[0]
            for e in eps
        ]
    )
    coef = np.polyfit(eps**2, gaps, 1)
    fit = np.polyval(coef, eps**2)
    ss_res = np.sum((gaps - fit) ** 2)
    ss_tot = np.sum((gaps - gaps.mean()) ** 2)
    assert 1.0 - ss_res / ss_tot >= 0.99


def test_best_response_accepts_particle_paths(particle_run):
    _, rh, _, paths = particle_run
    gap, se = best_response_gap(
        rh, paths, lambda t, x: 0.1 * np.ones_like(x), McConfig(5000)
    )
    assert gap > 0
    assert abs(gap - 0.005) <= 3 * se + 2e-3


# ---------------------------------------------------------------------------
# grid plumbing
# ---------------------------------------------------------------------------


def test_grid_spec_validation():
    with pytest.raises(SolverError):
        GridSpec(1.0, -1.0, 64, 0.0, 1.0, 10)
    with pytest.raises(SolverError):
        GridSpec(-1.0, 1.0, 8, 0.0, 1.0, 10)
    with pytest.raises(SolverError):
        GridSpec(-1.0, 1.0, 64, 0.0, 1.0, 1)
    with pytest.raises(SolverError):
        GridSpec(-1.0, 1.0, 64, 1.0, 0.5, 10)


def test_flow_solution_interpolators(coupled_flow):
    _, _, grid, sol = coupled_flow
    t = 0.37
    x = np.array([0.1, 0.5])
    u_mid = sol.u_at(t, x)
    assert np.all(np.isfinite(u_mid))
    # time interpolation brackets the neighbouring knots
    k = np.searchsorted(grid.ts, t) - 1
    lo = sol.u_at(grid.ts[k], x)
    hi = sol.u_at(grid.ts[k + 1], x)
    assert np.all(u_mid >= np.minimum(lo, hi) - 1e-9)
    assert np.all(u_mid <= np.maximum(lo, hi) + 1e-9)
