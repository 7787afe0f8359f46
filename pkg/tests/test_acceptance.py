"""End-to-end acceptance checks against closed-form oracles, at reference
resolution and with wall-clock budgets. Each test exercises one row of the
check suite at its reference tolerances."""

import json
import time

import pytest

from mfgc_lab.cli import main as cli_main
from mfgc_lab.suite import CHECKS, DEFAULT_TOLERANCES


def run_full(name, budget_s):
    tol = dict(DEFAULT_TOLERANCES[name])
    start = time.perf_counter()
    metrics = CHECKS[name](True, tol)
    elapsed = time.perf_counter() - start
    passed = metrics.pop("passed")
    assert passed, f"{name} failed: {metrics} (tolerances {tol})"
    assert elapsed < budget_s, f"{name} took {elapsed:.1f}s (budget {budget_s}s)"
    return metrics


def test_transport_quantile_equals_assignment():
    m = run_full("transport-oracle", 5.0)
    assert m["max_gap"] <= 1e-12
    assert m["instances"] == 200


def test_joint_law_fixed_point_closed_form():
    m = run_full("fixed-point", 1.0)
    assert m["residual"] <= 1e-12
    assert m["marginal_bitwise"] == 1.0


def test_concavity_constants():
    m = run_full("concavity", 5.0)
    assert m["c0_err"] <= 1e-4
    assert m["c1_err"] <= 1e-4
    assert m["C1_err"] <= 2e-4


def test_monotonicity_form_equivalence_sweep():
    m = run_full("monotonicity-forms", 30.0)
    assert m["max_rel_err"] <= 1e-3
    # the fixture is exactly quadratic: the sweep sits at the inner
    # finite-difference floor, which substitutes for the order gate
    assert m["min_order"] >= 1.0 or m["max_abs_err"] <= 1e-6


def test_solver_against_closed_form():
    m = run_full("solver-oracle", 120.0)
    assert m["u_err"] <= 5e-3 and m["du_err"] <= 5e-3
    assert m["mean_err"] <= 1e-3 and m["var_err"] <= 1e-3
    assert m["refinement_order"] >= 1.0


def test_best_response_optimality():
    m = run_full("best-response", 120.0)
    assert m["worst_z"] >= -3.0
    assert m["r_squared"] >= 0.99


def test_monotonicity_propagation():
    m = run_full("propagation", 300.0)
    assert m["disp_min_gap"] >= -1e-6
    assert m["ll_min_gap"] >= -1e-6


def test_measure_lipschitz_ratio():
    m = run_full("lipschitz", 300.0)
    assert m["max_err"] <= 1e-3
    assert m["sweep_spread"] <= 0.05


def test_mixed_state_measure_derivative_bound():
    m = run_full("xmu-bound", 120.0)
    assert m["spread"] <= 0.05
    assert max(m["values"]) <= 1.1 * m["bound"]


def test_master_equation_residual():
    m = run_full("master-residual", 300.0)
    assert m["stencil_floor"] <= 1e-4
    assert m["solver_residual"] <= 5e-2


def test_semigroup_consistency():
    m = run_full("semigroup", 120.0)
    assert m["discrepancy"] <= 1e-2


def test_repeated_suite_runs_byte_identical(tmp_path):
    # the reference-resolution suite shares every code path with the coarse
    # one; byte-level reproducibility is asserted on the coarse run (twice,
    # end to end through the CLI) plus the in-process double-solve check row
    outs = []
    for sub in ("one", "two"):
        out = tmp_path / sub
        code = cli_main(["suite", "--mode", "fast", "--out", str(out)])
        assert code == 0
        outs.append(out)
    for name in ("criteria.csv", "suite-report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    report = json.loads((outs[0] / "suite-report.json").read_text())
    assert report["checks"]["determinism"]["passed"] is True
