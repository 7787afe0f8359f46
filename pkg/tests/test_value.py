"""Value function on measures: direct evaluation against the Riccati
reference, the master-equation stencil, monotonicity propagation,
Lipschitz-ratio estimation, mixed derivatives, and semigroup consistency."""

import numpy as np
import pytest

from mfgc_lab.hamiltonian import ReducedHamiltonian
from mfgc_lab.lq_reference import LQReference
from mfgc_lab.measures import ParticleEnsemble, gaussian_density, make_rng
from mfgc_lab.models import StateLaw, lq_model, zero_drift_model
from mfgc_lab.solver import SolverError
from mfgc_lab.value import (
    FDConfig,
    ValueConfig,
    ValueQuery,
    density_wasserstein,
    kde_density,
    lipschitz_estimate,
    master_residual,
    propagation_check,
    semigroup_check,
    silverman_bandwidth,
    value,
    value_gradient,
    value_hessian,
    xmu_derivative_fd,
)

WIDE = np.linspace(-12.0, 12.0, 961)


@pytest.fixture(scope="module")
def lq():
    m = lq_model()
    return m, ReducedHamiltonian(m), LQReference(m)


# ---------------------------------------------------------------------------
# value and spatial derivatives
# ---------------------------------------------------------------------------


def test_value_terminal_slice_is_terminal_cost(lq):
    m, rh, _ = lq
    mu0 = gaussian_density(0.3, 1.0, WIDE)
    cfg = ValueConfig(n_x=64, n_t=4)
    q = ValueQuery(rh, m.G, cfg.horizon, 0.0, mu0, config=cfg)
    # pick an exact grid node for the bitwise terminal identity
    from mfgc_lab.value import GridValue

    ev = GridValue(rh, m.G, mu0, cfg)
    grid = ev.grid_for(cfg.horizon)
    x_node = grid.xs[17]
    q = ValueQuery(rh, m.G, cfg.horizon, float(x_node), mu0, config=cfg)
    density = gaussian_density(0.3, 1.0, grid.xs)
    law = StateLaw.from_density(density)
    expected = m.G(np.array([[x_node]]), law)[0]
    assert value(q) == expected


def test_value_null_problem_is_zero():
    m = lq_model(k=0.0, q=0.0, r=0.0, g=0.0, s=0.0)
    rh = ReducedHamiltonian(m)
    mu0 = gaussian_density(0.0, 1.0, WIDE)
    cfg = ValueConfig(n_x=64, n_t=32)
    q = ValueQuery(rh, m.G, 0.0, 0.7, mu0, config=cfg)
    assert abs(value(q)) < 1e-12


def test_value_matches_riccati(lq):
    m, rh, ref = lq
    mu0 = gaussian_density(0.0, 1.0, WIDE)
    q = ValueQuery(rh, m.G, 0.0, 1.0, mu0, config=ValueConfig(n_x=200, n_t=400))
    assert abs(value(q) - float(ref.u(0.0, 1.0, 0.0))) <= 5e-3


def test_gradient_linear_terminal_is_one():
    m = zero_drift_model(g=1.0)
    rh = ReducedHamiltonian(m)
    mu0 = gaussian_density(0.0, 1.0, WIDE)
    q = ValueQuery(rh, m.G, 0.0, 0.5, mu0, config=ValueConfig(n_x=200, n_t=100))
    assert abs(value_gradient(q)[0] - 1.0) < 1e-6


def test_gradient_matches_riccati(lq):
    m, rh, ref = lq
    mu0 = gaussian_density(0.4, 1.0, WIDE)
    q = ValueQuery(rh, m.G, 0.0, 1.2, mu0, config=ValueConfig(n_x=200, n_t=400))
    expected = ref.A(0.0) * 1.2 + ref.B(0.0) * 0.4
    assert abs(value_gradient(q)[0] - expected) <= 5e-3


def test_gradient_odd_symmetry(lq):
    m, rh, _ = lq
    mu0 = gaussian_density(0.0, 1.0, WIDE)
    q = ValueQuery(rh, m.G, 0.0, 0.0, mu0, config=ValueConfig(n_x=200, n_t=400))
    assert abs(value_gradient(q)[0]) <= 1e-6


def test_hessian_matches_riccati_curvature(lq):
    m, rh, ref = lq
    mu0 = gaussian_density(0.0, 1.0, WIDE)
    q = ValueQuery(rh, m.G, 0.0, 0.8, mu0, config=ValueConfig(n_x=200, n_t=400))
    assert abs(value_hessian(q)[0, 0] - ref.A(0.0)) <= 5e-3


def test_flow_identity_interpolation_consistency(lq):
    m, rh, _ = lq
    from mfgc_lab.value import GridValue

    cfg = ValueConfig(n_x=128, n_t=64)
    mu0 = gaussian_density(0.2, 1.0, WIDE)
    ev = GridValue(rh, m.G, mu0, cfg)
    sol = ev.solve(0.0)
    for k in (0, 17, 64):
        assert np.max(np.abs(sol.u_at(sol.grid.ts[k], sol.grid.xs) - sol.u[k])) <= 1e-10


def test_value_query_validation(lq):
    m, rh, _ = lq
    mu0 = gaussian_density(0.0, 1.0, WIDE)
    with pytest.raises(SolverError):
        ValueQuery(rh, m.G, -0.5, 0.0, mu0)
    with pytest.raises(SolverError):
        ValueQuery(rh, m.G, 0.0, 0.0, mu0, method="magic")


# ---------------------------------------------------------------------------
# measure plumbing
# ---------------------------------------------------------------------------


def test_kde_density_moments():
    pts = make_rng(3).normal(0.5, 1.0, size=4000)
    bw = silverman_bandwidth(pts)
    from mfgc_lab.measures import DensityGrid1d

    dens = DensityGrid1d(WIDE, kde_density(pts, WIDE, bw))
    assert abs(dens.mean() - np.mean(pts)) < 1e-6  # KDE preserves the mean
    assert abs(dens.variance() - (np.var(pts) + bw**2)) < 1e-6


def test_density_wasserstein_translation():
    m1 = gaussian_density(0.0, 1.0, WIDE)
    m2 = gaussian_density(0.7, 1.0, WIDE)
    for order in (1, 2):
        assert abs(density_wasserstein(order, m1, m2) - 0.7) < 1e-3
        assert density_wasserstein(order, m1, m1) == 0.0


# ---------------------------------------------------------------------------
# master-equation residual
# ---------------------------------------------------------------------------


def test_master_residual_null_problem_is_zero():
    m = lq_model(k=0.0, q=0.0, r=0.0, g=0.0, s=0.0)
    rh = ReducedHamiltonian(m)
    pts = make_rng(1).normal(0.0, 1.0, size=8)
    cfg = ValueConfig(n_x=64)
    q = ValueQuery(rh, m.G, 0.3, 0.4, ParticleEnsemble(pts), config=cfg)
    assert master_residual(q, FDConfig(dt=0.05)) <= 1e-10


def test_master_residual_oracle_stencil_floor(lq):
    m, rh, ref = lq
    pts = make_rng(7).normal(0.3, 1.0, size=32)

    def oracle_slice(t, points):
        mt = float(np.mean(points))
        return lambda xq: ref.u(t, np.asarray(xq, dtype=float), mt)

    q = ValueQuery(rh, m.G, 0.2, 0.7, ParticleEnsemble(pts))
    assert master_residual(q, FDConfig(), slice_fn=oracle_slice) <= 1e-4


def test_master_residual_terminal_slice_finite(lq):
    m, rh, ref = lq
    pts = make_rng(9).normal(0.0, 1.0, size=16)

    def oracle_slice(t, points):
        mt = float(np.mean(points))
        return lambda xq: ref.u(t, np.asarray(xq, dtype=float), mt)

    q = ValueQuery(rh, m.G, 1.0, 0.5, ParticleEnsemble(pts))
    r = master_residual(q, FDConfig(), slice_fn=oracle_slice)
    assert np.isfinite(r)


def test_master_residual_requires_particles(lq):
    m, rh, _ = lq
    mu0 = gaussian_density(0.0, 1.0, WIDE)
    q = ValueQuery(rh, m.G, 0.0, 0.0, mu0)
    with pytest.raises(SolverError):
        master_residual(q)


# ---------------------------------------------------------------------------
# propagation of monotonicity
# ---------------------------------------------------------------------------


def _pairs(rng, n, grid=WIDE):
    out = []
    for _ in range(n):
        m1, m2 = rng.normal(0.0, 1.0, 2)
        s1, s2 = rng.uniform(0.7, 1.3, 2)
        out.append((gaussian_density(m1, s1, grid), gaussian_density(m2, s2, grid)))
    return out


def test_propagation_identical_pairs_zero(lq):
    m, rh, _ = lq
    mu = gaussian_density(0.3, 1.0, WIDE)
    cfg = ValueConfig(n_x=128, n_t=128)
    rep = propagation_check("ll", rh, m.G, [(mu, mu)], config=cfg)
    assert np.all(rep.gaps == 0.0)
    assert rep.passed()


def test_propagation_disp_monotone_fixture(lq):
    m, rh, _ = lq
    cfg = ValueConfig(n_x=128, n_t=128)
    rep = propagation_check("disp", rh, m.G, _pairs(make_rng(11), 3), config=cfg)
    assert rep.min_gap >= -1e-6
    assert rep.passed()


def test_propagation_ll_monotone_fixture_and_terminal_gap():
    m = lq_model(k=0.0, q=0.2, r=0.2, g=0.5, s=0.3)
    rh = ReducedHamiltonian(m)
    ref = LQReference(m)
    cfg = ValueConfig(n_x=128, n_t=128)
    pairs = _pairs(make_rng(13), 3)
    rep = propagation_check("ll", rh, m.G, pairs, config=cfg)
    assert rep.min_gap >= -1e-6
    # terminal checkpoint gap for G = g x^2/2 + s x mbar is s * (mean gap)^2
    s = m.params["s"]
    for ip, (m1, m2) in enumerate(pairs):
        dm_T = ref.mean_flow(m1.mean(), 1.0) - ref.mean_flow(m2.mean(), 1.0)
        expected = s * dm_T**2
        assert abs(rep.gaps[ip, -1] - expected) <= 2e-2 * expected + 5e-4


def test_propagation_rejects_unknown_kind(lq):
    m, rh, _ = lq
    with pytest.raises(SolverError):
        propagation_check("weird", rh, m.G, [])


# ---------------------------------------------------------------------------
# Lipschitz estimation
# ---------------------------------------------------------------------------


def test_lipschitz_identical_pair_skipped(lq):
    m, rh, _ = lq
    mu = gaussian_density(0.0, 1.0, WIDE)
    est = lipschitz_estimate(2, rh, m.G, [(mu, mu)], 0.0, ValueConfig(n_x=128, n_t=128))
    assert est["skipped"] == 1
    assert est["ratios"].size == 0


def test_lipschitz_translated_pairs_match_riccati(lq):
    m, rh, ref = lq
    cfg = ValueConfig(n_x=160, n_t=160)
    pairs = [
        (gaussian_density(c, 1.0, WIDE), gaussian_density(c + 0.5, 1.0, WIDE))
        for c in (-0.3, 0.0, 0.4)
    ]
    est = lipschitz_estimate(2, rh, m.G, pairs, 0.0, cfg)
    assert abs(est["max"] - abs(ref.B(0.0))) <= 1e-3
    assert np.all(est["ratios"] <= abs(ref.B(0.0)) + 1e-3)


# ---------------------------------------------------------------------------
# mixed state-measure derivative
# ---------------------------------------------------------------------------


def test_xmu_measure_independent_model_is_zero():
    m = lq_model(k=0.0, q=0.1, r=0.0, g=0.5, s=0.0)
    rh = ReducedHamiltonian(m)
    pts = make_rng(5).normal(0.0, 1.0, size=8)
    q = ValueQuery(rh, m.G, 0.0, 0.3, ParticleEnsemble(pts), config=ValueConfig(n_x=128, n_t=128))
    assert abs(xmu_derivative_fd(q, 2)) <= 1e-6


def test_xmu_matches_riccati_slope(lq):
    m, rh, ref = lq
    pts = make_rng(5).normal(0.2, 1.0, size=16)
    q = ValueQuery(
        rh, m.G, 0.0, 0.5, ParticleEnsemble(pts), config=ValueConfig(n_x=160, n_t=320)
    )
    est = xmu_derivative_fd(q, 3)
    assert abs(est - ref.B(0.0)) <= 5e-3


def test_xmu_validation(lq):
    m, rh, _ = lq
    pts = make_rng(5).normal(0.0, 1.0, size=8)
    q = ValueQuery(rh, m.G, 0.0, 0.0, ParticleEnsemble(pts))
    with pytest.raises(SolverError):
        xmu_derivative_fd(q, 99)
    qd = ValueQuery(rh, m.G, 0.0, 0.0, gaussian_density(0.0, 1.0, WIDE))
    with pytest.raises(SolverError):
        xmu_derivative_fd(qd, 0)


# ---------------------------------------------------------------------------
# semigroup consistency
# ---------------------------------------------------------------------------


def test_semigroup_trivial_splits(lq):
    m, rh, _ = lq
    mu0 = gaussian_density(0.3, 1.0, WIDE)
    cfg = ValueConfig(n_x=128, n_t=128)
    qs = np.linspace(-2, 2, 11)
    assert semigroup_check(rh, m.G, mu0, 0.0, 0.0, qs, cfg) == 0.0
    assert semigroup_check(rh, m.G, mu0, 0.0, 1.0, qs, cfg) <= 1e-8


def test_semigroup_midpoint_split(lq):
    m, rh, _ = lq
    mu0 = gaussian_density(0.5, 1.0, WIDE)
    cfg = ValueConfig(n_x=200, n_t=400)
    qs = np.linspace(-2, 3, 21)
    assert semigroup_check(rh, m.G, mu0, 0.0, 0.5, qs, cfg) <= 1e-2
