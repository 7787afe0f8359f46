"""Acceptance-check suite: twelve independent numerical checks against
closed-form oracles, runnable at a coarse ("fast") or reference ("full")
resolution. Failures are collected, never raised."""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import (
    ReducedHamiltonian,
    concavity_probe,
    fixed_point_phi,
)
from .lq_reference import LQReference
from .measures import (
    JointEnsemble,
    ParticleEnsemble,
    gaussian_density,
    make_rng,
    wasserstein,
    wasserstein_assignment_1d,
)
from .models import lq_model
from . import monotonicity as mono
from .solver import (
    FlowSolution,
    GridSpec,
    McConfig,
    ParticleConfig,
    PicardConfig,
    best_response_gap,
    equilibrium_picard,
    solve_particle_fbsde,
)
from .value import (
    FDConfig,
    ValueConfig,
    ValueQuery,
    lipschitz_estimate,
    master_residual,
    propagation_check,
    semigroup_check,
    xmu_derivative_fd,
)

WIDE = np.linspace(-12.0, 12.0, 961)


@dataclass
class CriterionResult:
    """Outcome of one acceptance check: pass/fail verdict plus the measured
    quantities and the tolerances they were compared against."""

    name: str
    passed: bool
    metrics: dict
    tolerances: dict
    elapsed: float
    error: str | None = None


@dataclass
class SuiteReport:
    mode: str
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        width = max(len(r.name) for r in self.results) if self.results else 4
        lines = [f"{'check'.ljust(width)}  verdict  seconds"]
        for r in self.results:
            verdict = "pass" if r.passed else "FAIL"
            lines.append(f"{r.name.ljust(width)}  {verdict!s:7}  {r.elapsed:7.1f}")
        return "\n".join(lines)


def _lq():
    m = lq_model()
    return m, ReducedHamiltonian(m), LQReference(m)


# ---------------------------------------------------------------------------
# the twelve checks
# ---------------------------------------------------------------------------


def check_transport(full: bool, tol: dict) -> dict:
    """Sorted-quantile transport distance agrees with the assignment-problem
    optimum on random equal-weight instances."""
    rng = make_rng(101)
    worst = 0.0
    n_inst = 200 if full else 60
    for _ in range(n_inst):
        n = int(rng.integers(1, 9))
        a = ParticleEnsemble(rng.normal(size=n))
        b = ParticleEnsemble(rng.normal(size=n))
        worst = max(worst, abs(wasserstein(2, a, b) - wasserstein_assignment_1d(2, a, b)))
    return {"instances": float(n_inst), "max_gap": worst,
            "passed": worst <= tol["max_gap"]}


def check_fixed_point(full: bool, tol: dict) -> dict:
    """Joint state-control fixed point hits the linear closed form."""
    m, rh, _ = _lq()
    k = m.params["k"]
    pts = make_rng(102).normal(0.3, 1.0, size=(8, 1))
    ps = make_rng(103).normal(0.0, 1.0, size=(8, 1))
    nu = fixed_point_phi(rh, JointEnsemble(np.hstack([pts, ps])))
    abar = -np.mean(ps) / (1.0 + k)
    residual = float(np.sqrt(np.mean((nu.seconds - (-(ps + k * abar))) ** 2)))
    marginal_ok = np.array_equal(nu.states, pts)
    return {"residual": residual, "marginal_bitwise": float(marginal_ok),
            "passed": residual <= tol["residual"] and marginal_ok}


def check_concavity(full: bool, tol: dict) -> dict:
    """Concavity constants of the reduced Hamiltonian on the coupled fixture."""
    _, rh, _ = _lq()
    rng = make_rng(104)
    samples = []
    for _ in range(5 if full else 3):
        rho = JointEnsemble(rng.normal(size=(4, 2)))
        samples.append((rng.normal(size=1), rng.normal(size=1), rho))
    rep = concavity_probe(rh, samples)
    e0 = abs(rep["c0_hat"] - 1.0)
    e1 = abs(rep["c1_hat"] - 1.0 / 3.0)
    eC = abs(rep["C1_hat"] - 2.0 / 3.0)
    return {"c0_err": e0, "c1_err": e1, "C1_err": eC,
            "passed": e0 <= tol["c0"] and e1 <= tol["c1"] and eC <= tol["C1"]}


def check_monotonicity_forms(full: bool, tol: dict) -> dict:
    """Second differences of the integral displacement gap recover the
    differential form. The fixture is exactly quadratic, so the sweep sits
    at the inner finite-difference floor for every step size; the order
    requirement is waived whenever every error is already below that floor."""
    _, rh, _ = _lq()
    rng = make_rng(105)
    lam = 0.1
    worst_rel, worst_abs, min_order = 0.0, 0.0, np.inf
    for _ in range(20 if full else 5):
        joint = JointEnsemble(rng.normal(size=(8, 2)))
        gamma = rng.normal(size=(8, 1))
        zeta = rng.normal(size=(8, 1))
        diff = mono.disp_diff_form_H(rh, joint, gamma, zeta, lam, exact_tilde=True)
        errs = []
        for eps in (1e-2, 1e-3, 1e-4):
            pert = JointEnsemble(
                np.hstack([joint.states + eps * gamma, joint.seconds + eps * zeta])
            )
            errs.append(abs(mono.disp_gap_H(rh, pert, joint, lam) / eps**2 + diff))
        if errs[1] > 0:
            min_order = min(min_order, float(np.log10(errs[0] / errs[1])))
        worst_rel = max(worst_rel, errs[2] / abs(diff))
        worst_abs = max(worst_abs, max(errs))
    order_ok = min_order >= 1.0 or worst_abs <= tol["floor"]
    return {"min_order": min_order, "max_abs_err": worst_abs, "max_rel_err": worst_rel,
            "passed": order_ok and worst_rel <= tol["rel_err"]}


def _coupled_flow(n_x, n_t, theta=1.0):
    m, rh, ref = _lq()
    grid = GridSpec(-8.0, 9.0, n_x, 0.0, 1.0, n_t)
    mu0 = gaussian_density(0.5, 1.0, grid.xs)
    cfg = PicardConfig(theta_out=theta, tol_out=1e-8, max_outer=60)
    flow = equilibrium_picard(rh, m.G, mu0, grid, config=cfg)
    return m, rh, ref, flow


def _flow_errors(flow: FlowSolution, ref: LQReference, margin=5.0):
    grid = flow.grid
    keep = (grid.xs > grid.x_min + margin) & (grid.xs < grid.x_max - margin)
    u_err = du_err = mean_err = var_err = 0.0
    m0 = flow.mu_density(0).mean()
    v0 = flow.mu_density(0).variance()
    for k, t in enumerate(grid.ts):
        mt = ref.mean_flow(m0, t)
        u_err = max(u_err, float(np.max(np.abs(flow.u[k][keep] - ref.u(t, grid.xs[keep], mt)))))
        du_err = max(du_err, float(np.max(np.abs(flow.du[k][keep] - ref.du(t, grid.xs[keep], mt)))))
        dens = flow.mu_density(k)
        mean_err = max(mean_err, abs(dens.mean() - mt))
        var_err = max(var_err, abs(dens.variance() - ref.variance_flow(v0, t)))
    return u_err, du_err, mean_err, var_err


def check_solver_oracle(full: bool, tol: dict) -> dict:
    """Coupled equilibrium flow against the Riccati reference, plus a
    refinement pair confirming at least first-order error decay."""
    if full:
        _, _, ref, flow = _coupled_flow(400, 2000)
    else:
        _, _, ref, flow = _coupled_flow(100, 200)
    u_err, du_err, mean_err, var_err = _flow_errors(flow, ref)

    _, _, refc, coarse = _coupled_flow(100, 125)
    _, _, _, fine = _coupled_flow(200, 500)
    ec = max(_flow_errors(coarse, refc)[:2])
    ef = max(_flow_errors(fine, refc)[:2])
    order = float(np.log2(ec / ef)) if ef > 0 else np.inf
    return {"u_err": u_err, "du_err": du_err, "mean_err": mean_err,
            "var_err": var_err, "refinement_order": order,
            "passed": (u_err <= tol["u_err"] and du_err <= tol["du_err"]
                       and mean_err <= tol["moment_err"] and var_err <= tol["moment_err"]
                       and order >= tol["order"])}


def check_best_response(full: bool, tol: dict) -> dict:
    """Monte-Carlo deviation gaps are nonnegative within sampling error and
    scale quadratically in the perturbation size."""
    _, rh, _, flow = _coupled_flow(200 if full else 100, 400 if full else 200)
    mc = McConfig(n_paths=20000 if full else 4000, seed=7)
    fields = [
        lambda t, x: 0.1 * np.ones_like(x),
        lambda t, x: 0.1 * np.sin(x),
        lambda t, x: 0.05 * x,
        lambda t, x: 0.1 * np.exp(-0.5 * x**2),
        lambda t, x: 0.1 * np.cos(3.0 * t) * np.ones_like(x),
    ]
    worst_z = np.inf
    for pert in fields[: 5 if full else 3]:
        gap, se = best_response_gap(rh, flow, pert, mc)
        worst_z = min(worst_z, gap / max(se, 1e-300))
    eps = np.array([0.05, 0.1, 0.2])
    gaps = np.array([
        best_response_gap(rh, flow, lambda t, x, e=e: e * np.ones_like(x), mc)[0]
        for e in eps
    ])
    slope = float(np.sum(gaps * eps**2) / np.sum(eps**4))
    ss_res = float(np.sum((gaps - slope * eps**2) ** 2))
    ss_tot = float(np.sum((gaps - np.mean(gaps)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"worst_z": worst_z, "r_squared": r2,
            "passed": worst_z >= -tol["z"] and r2 >= tol["r2"]}


def _measure_pairs(rng, n, grid=WIDE):
    out = []
    for _ in range(n):
        m1, m2 = rng.normal(0.0, 0.8, 2)
        s1, s2 = rng.uniform(0.7, 1.3, 2)
        out.append((gaussian_density(m1, s1, grid), gaussian_density(m2, s2, grid)))
    return out


def check_propagation(full: bool, tol: dict) -> dict:
    """Monotonicity gaps of the value function stay nonnegative along the
    flow for both monotone fixture families."""
    n_pairs = 20 if full else 3
    cfg = ValueConfig(n_x=128, n_t=128)
    m_disp, rh_disp, _ = _lq()
    rep_d = propagation_check("disp", rh_disp, m_disp.G,
                              _measure_pairs(make_rng(106), n_pairs), config=cfg)
    m_ll = lq_model(k=0.0, q=0.2, r=0.2, g=0.5, s=0.3)
    rep_l = propagation_check("ll", ReducedHamiltonian(m_ll), m_ll.G,
                              _measure_pairs(make_rng(107), n_pairs), config=cfg)
    min_gap = min(rep_d.min_gap, rep_l.min_gap)
    return {"disp_min_gap": rep_d.min_gap, "ll_min_gap": rep_l.min_gap,
            "passed": min_gap >= -tol["gap"]}


def check_lipschitz(full: bool, tol: dict) -> dict:
    """Measure-Lipschitz ratio of the value gradient matches the closed-form
    coefficient, and is stable across two decades of measure distance."""
    m, rh, ref = _lq()
    n_pairs = 50 if full else 6
    rng = make_rng(108)
    # translation pairs realize the supremal ratio; mixed pairs stay below it
    pairs = [
        (gaussian_density(c, 1.0, WIDE), gaussian_density(c + 0.4, 1.0, WIDE))
        for c in rng.uniform(-0.5, 0.5, max(n_pairs // 5, 2))
    ]
    pairs += _measure_pairs(rng, n_pairs - len(pairs))
    cfg = ValueConfig(n_x=160, n_t=160)
    est = lipschitz_estimate(2, rh, m.G, pairs, 0.0, cfg)
    target = abs(ref.B(0.0))
    max_err = abs(est["max"] - target)

    deltas = (0.5, 0.158, 0.05, 0.0158, 0.005)
    sweep = [
        (gaussian_density(0.0, 1.0, WIDE), gaussian_density(d, 1.0, WIDE))
        for d in deltas
    ]
    ratios = lipschitz_estimate(2, rh, m.G, sweep, 0.0, cfg)["ratios"]
    spread = float((np.max(ratios) - np.min(ratios)) / np.median(ratios))
    return {"max_ratio": est["max"], "max_err": max_err, "sweep_spread": spread,
            "passed": max_err <= tol["ratio_err"] and spread <= tol["spread"]}


def check_xmu_bound(full: bool, tol: dict) -> dict:
    """Mixed state-measure derivative is stable in the particle count and
    bounded by the closed-form coefficient."""
    m, rh, ref = _lq()
    bound = float(np.max(np.abs([ref.B(t) for t in np.linspace(0.0, 1.0, 201)])))
    sizes = (8, 16, 32) if full else (8, 16)
    vals = []
    for n in sizes:
        pts = make_rng(109).normal(0.2, 1.0, size=n)
        q = ValueQuery(rh, m.G, 0.0, 0.5, ParticleEnsemble(pts),
                       config=ValueConfig(n_x=160, n_t=320))
        vals.append(abs(xmu_derivative_fd(q, n // 2)))
    vals = np.array(vals)
    spread = float((np.max(vals) - np.min(vals)) / np.median(vals))
    return {"values": [float(v) for v in vals], "spread": spread, "bound": bound,
            "passed": spread <= tol["spread"] and float(np.max(vals)) <= tol["bound_factor"] * bound}


def check_master_residual(full: bool, tol: dict) -> dict:
    """Master-equation residual of the solver value and the stencil floor on
    the closed-form value, both at the same particle cloud."""
    m, rh, ref = _lq()
    pts = make_rng(110).normal(0.3, 1.0, size=32)
    mu0 = ParticleEnsemble(pts)

    def oracle_slice(t, points):
        mt = float(np.mean(points))
        return lambda xq: ref.u(t, np.asarray(xq, dtype=float), mt)

    q = ValueQuery(rh, m.G, 0.2, 0.7, mu0)
    floor = master_residual(q, FDConfig(), slice_fn=oracle_slice)
    out = {"stencil_floor": floor}
    if full:
        qs = ValueQuery(rh, m.G, 0.2, 0.7, mu0,
                        config=ValueConfig(n_x=150, n_outer_fd=2))
        out["solver_residual"] = master_residual(qs, FDConfig())
        out["passed"] = (floor <= tol["floor"]
                         and out["solver_residual"] <= tol["solver"])
    else:
        out["passed"] = floor <= tol["floor"]
    return out


def check_semigroup(full: bool, tol: dict) -> dict:
    """Restarting the solve from an intermediate equilibrium flow reproduces
    the direct value."""
    m, rh, _ = _lq()
    mu0 = gaussian_density(0.5, 1.0, WIDE)
    cfg = ValueConfig(n_x=200, n_t=400) if full else ValueConfig(n_x=128, n_t=128)
    disc = semigroup_check(rh, m.G, mu0, 0.0, 0.5, np.linspace(-2, 3, 21), cfg)
    return {"discrepancy": disc, "passed": disc <= tol["discrepancy"]}


def check_determinism(full: bool, tol: dict) -> dict:
    """Identical configuration and seed reproduce byte-identical serialized
    outputs for both solution methods."""
    m, rh, _ = _lq()

    def grid_bytes():
        grid = GridSpec(-6.0, 7.0, 64, 0.0, 1.0, 32)
        mu0 = gaussian_density(0.5, 1.0, grid.xs)
        flow = equilibrium_picard(rh, m.G, mu0, grid,
                                  config=PicardConfig(theta_out=1.0, tol_out=1e-8))
        return flow.u.tobytes() + flow.mu.tobytes() + flow.mu_density(8).to_csv().encode()

    def particle_bytes():
        grid = GridSpec(-6.0, 7.0, 64, 0.0, 1.0, 20)
        xi0 = ParticleEnsemble(make_rng(111).normal(0.3, 1.0, size=256))
        run = solve_particle_fbsde(rh, m.dxG, xi0, grid, seed=5,
                                   config=ParticleConfig(max_picard=4, tol_out=np.inf))
        return run.X.tobytes() + run.Y.tobytes()

    ok = grid_bytes() == grid_bytes() and particle_bytes() == particle_bytes()
    return {"identical": float(ok), "passed": ok}


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

DEFAULT_TOLERANCES = {
    "transport-oracle": {"max_gap": 1e-12},
    "fixed-point": {"residual": 1e-12},
    "concavity": {"c0": 1e-4, "c1": 1e-4, "C1": 2e-4},
    "monotonicity-forms": {"rel_err": 1e-3, "floor": 1e-6},
    "solver-oracle": {"u_err": 5e-3, "du_err": 5e-3, "moment_err": 1e-3, "order": 1.0},
    "best-response": {"z": 3.0, "r2": 0.99},
    "propagation": {"gap": 1e-6},
    "lipschitz": {"ratio_err": 1e-3, "spread": 0.05},
    "xmu-bound": {"spread": 0.05, "bound_factor": 1.1},
    "master-residual": {"floor": 1e-4, "solver": 5e-2},
    "semigroup": {"discrepancy": 1e-2},
    "determinism": {},
}

# fast mode runs coarse grids, so the solver-accuracy gates are proportionally
# looser; every other check keeps its reference tolerance
FAST_OVERRIDES = {
    "solver-oracle": {"u_err": 5e-2, "du_err": 5e-2, "moment_err": 1e-2, "order": 1.0},
}

CHECKS = {
    "transport-oracle": check_transport,
    "fixed-point": check_fixed_point,
    "concavity": check_concavity,
    "monotonicity-forms": check_monotonicity_forms,
    "solver-oracle": check_solver_oracle,
    "best-response": check_best_response,
    "propagation": check_propagation,
    "lipschitz": check_lipschitz,
    "xmu-bound": check_xmu_bound,
    "master-residual": check_master_residual,
    "semigroup": check_semigroup,
    "determinism": check_determinism,
}


def thread_budget() -> int:
    raw = os.environ.get("MFGC_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_suite(mode: str = "fast", tolerances: dict | None = None,
              names: list | None = None) -> SuiteReport:
    """Run the acceptance checks at the requested resolution. `tolerances`
    maps check name to overrides of its individual gates; `names` restricts
    to a subset. Failures (including exceptions) are collected per check."""
    if mode not in ("fast", "full"):
        raise ValueError(f"unknown suite mode {mode!r}; expected 'fast' or 'full'")
    full = mode == "full"
    selected = list(CHECKS) if names is None else list(names)
    for name in selected:
        if name not in CHECKS:
            raise ValueError(f"unknown check {name!r}; known: {', '.join(CHECKS)}")

    def one(name):
        tol = dict(DEFAULT_TOLERANCES[name])
        if not full:
            tol.update(FAST_OVERRIDES.get(name, {}))
        tol.update((tolerances or {}).get(name, {}))
        start = time.perf_counter()
        try:
            metrics = CHECKS[name](full, tol)
            passed = bool(metrics.pop("passed"))
            err = None
        except Exception as exc:  # collected, not raised: the suite must finish
            metrics, passed, err = {}, False, f"{type(exc).__name__}: {exc}"
        return CriterionResult(name, passed, metrics, tol,
                               time.perf_counter() - start, err)

    workers = min(thread_budget(), len(selected))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, selected))
    else:
        results = [one(name) for name in selected]
    return SuiteReport(mode=mode, results=results)
