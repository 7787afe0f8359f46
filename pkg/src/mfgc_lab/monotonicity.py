"""Monotonicity gap functionals: Lasry-Lions and displacement forms for
value-type functions and for the reduced Hamiltonian, in both integral and
differential versions, plus a batch checker over sampled fixtures.

Signed-measure integrals are evaluated as differences of ensemble averages;
couplings are realized by index pairing; tilde copies are a second paired
sample resampled from the support with an independent seed."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import (
    ReducedHamiltonian,
    fixed_point_law,
    hamiltonian_min_many,
)
from .measures import JointEnsemble, MeasureError, ParticleEnsemble, independent_copy_indices, make_rng
from .models import JointLaw


@dataclass
class MonotonicityReport:
    kind: str
    trials: int
    min_gap: float
    tolerance: float
    verdict: bool
    argmin: dict = field(default_factory=dict)
    gaps: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# integral forms for value-type functions
# ---------------------------------------------------------------------------


def _paired(xi1, xi2):
    if len(xi1) != len(xi2) or xi1.dim != xi2.dim:
        raise MeasureError("paired ensembles must share size and dimension")


def ll_gap_U(U, xi1: ParticleEnsemble, xi2: ParticleEnsemble) -> float:
    """Lasry-Lions gap of U(x, mu):
    E[U(xi1, L1) + U(xi2, L2) - U(xi1, L2) - U(xi2, L1)]."""
    _paired(xi1, xi2)
    a = np.asarray(U(xi1.points, xi1), dtype=float)
    b = np.asarray(U(xi2.points, xi2), dtype=float)
    c = np.asarray(U(xi1.points, xi2), dtype=float)
    d = np.asarray(U(xi2.points, xi1), dtype=float)
    return float(np.mean(a + b - c - d))


def disp_gap_U(dxU, lam: float, xi1: ParticleEnsemble, xi2: ParticleEnsemble) -> float:
    """Displacement lambda-monotonicity gap of U via its spatial gradient:
    E<dxU(xi1, L1) - dxU(xi2, L2), xi1 - xi2> + lam E|xi1 - xi2|^2."""
    _paired(xi1, xi2)
    g1 = np.atleast_2d(np.asarray(dxU(xi1.points, xi1), dtype=float))
    g2 = np.atleast_2d(np.asarray(dxU(xi2.points, xi2), dtype=float))
    delta = xi1.points - xi2.points
    return float(np.mean(np.sum((g1 - g2) * delta, axis=1) + lam * np.sum(delta**2, axis=1)))


# ---------------------------------------------------------------------------
# integral forms for the reduced Hamiltonian
# ---------------------------------------------------------------------------


def ll_gap_H(rh: ReducedHamiltonian, phi, mu1: ParticleEnsemble, mu2: ParticleEnsemble) -> float:
    """Lasry-Lions integral gap for the reduced Hamiltonian along a feedback
    phi(x, mu): the signed integral of H(x, phi(x, mu^i), rho^i) against
    mu^1 - mu^2 minus the momentum compensator, with
    rho^i = (id, phi(., mu^i)) # mu^i."""
    p1_on_1 = np.atleast_2d(np.asarray(phi(mu1.points, mu1), dtype=float))
    p2_on_2 = np.atleast_2d(np.asarray(phi(mu2.points, mu2), dtype=float))
    p1_on_2 = np.atleast_2d(np.asarray(phi(mu2.points, mu1), dtype=float))
    p2_on_1 = np.atleast_2d(np.asarray(phi(mu1.points, mu2), dtype=float))
    rho1 = JointLaw.from_arrays(mu1.points, p1_on_1)
    rho2 = JointLaw.from_arrays(mu2.points, p2_on_2)
    nu1, _, _, _ = fixed_point_law(rh, rho1)
    nu2, _, _, _ = fixed_point_law(rh, rho2)

    def H(xs, ps, nu):
        vals, _ = hamiltonian_min_many(rh, xs, ps, nu)
        return vals

    # first integral: (H^1 - H^2)(x) against (mu1 - mu2)(dx)
    h1_minus_h2_on_1 = H(mu1.points, p1_on_1, nu1) - H(mu1.points, p2_on_1, nu2)
    h1_minus_h2_on_2 = H(mu2.points, p1_on_2, nu1) - H(mu2.points, p2_on_2, nu2)
    first = np.mean(h1_minus_h2_on_1) - np.mean(h1_minus_h2_on_2)

    # second: (phi^1 - phi^2) . (dpH(., rho1) dmu1 - dpH(., rho2) dmu2)
    dp1 = _dp_batch(rh, mu1.points, p1_on_1, nu1)
    dp2 = _dp_batch(rh, mu2.points, p2_on_2, nu2)
    second = np.mean(np.sum((p1_on_1 - p2_on_1) * dp1, axis=1)) - np.mean(
        np.sum((p1_on_2 - p2_on_2) * dp2, axis=1)
    )
    return float(first - second)


def disp_gap_H(rh: ReducedHamiltonian, j1: JointEnsemble, j2: JointEnsemble, lam: float) -> float:
    """Displacement lambda-monotonicity integral gap for the reduced
    Hamiltonian on paired joint (state, momentum) ensembles."""
    if len(j1) != len(j2) or j1.dim != j2.dim:
        raise MeasureError("paired joint ensembles must share size and dimension")
    nu1, _, _, _ = fixed_point_law(rh, JointLaw.from_ensemble(j1))
    nu2, _, _, _ = fixed_point_law(rh, JointLaw.from_ensemble(j2))
    dx1, dp1 = _grad_batch(rh, j1.states, j1.seconds, nu1)
    dx2, dp2 = _grad_batch(rh, j2.states, j2.seconds, nu2)
    dxi = j1.states - j2.states
    deta = j1.seconds - j2.seconds
    term_x = np.sum((dx1 - dx2) * dxi, axis=1)
    term_p = np.sum((dp1 - dp2) * deta, axis=1)
    term_l = np.sum((dp1 - dp2) * dxi, axis=1)
    return float(np.mean(term_x - term_p - 2.0 * lam * term_l))


def ll_lagrangian_gap(f, rho1: JointEnsemble, rho2: JointEnsemble) -> float:
    """Interaction monotonicity of a running cost f(x, a, rho):
    the signed integral of f(., rho1) - f(., rho2) against rho1 - rho2."""
    d1 = np.asarray(f(rho1.states, rho1.seconds, rho1), dtype=float) - np.asarray(
        f(rho1.states, rho1.seconds, rho2), dtype=float
    )
    d2 = np.asarray(f(rho2.states, rho2.seconds, rho1), dtype=float) - np.asarray(
        f(rho2.states, rho2.seconds, rho2), dtype=float
    )
    return float(np.mean(d1) - np.mean(d2))


# ---------------------------------------------------------------------------
# finite-difference derivative tables
# ---------------------------------------------------------------------------


def _dp_batch(rh, xs, ps, nu, eps=None):
    eps = rh.eps_p if eps is None else eps
    xs = np.atleast_2d(xs)
    ps = np.atleast_2d(ps)
    n, d = ps.shape
    out = np.zeros((n, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        hp, _ = hamiltonian_min_many(rh, xs, ps + e, nu)
        hm, _ = hamiltonian_min_many(rh, xs, ps - e, nu)
        out[:, j] = (hp - hm) / (2 * eps)
    return out


def _dx_batch(rh, xs, ps, nu, eps=None):
    eps = rh.eps_x if eps is None else eps
    xs = np.atleast_2d(xs)
    ps = np.atleast_2d(ps)
    n, d = xs.shape
    out = np.zeros((n, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        hp, _ = hamiltonian_min_many(rh, xs + e, ps, nu)
        hm, _ = hamiltonian_min_many(rh, xs - e, ps, nu)
        out[:, j] = (hp - hm) / (2 * eps)
    return out


def _grad_batch(rh, xs, ps, nu):
    return _dx_batch(rh, xs, ps, nu), _dp_batch(rh, xs, ps, nu)


def _second_derivs(rh, xs, ps, nu, eps=5e-4):
    """(Hpp, Hxx, Hxp) as (n, d, d) arrays of second differences of the
    Hamiltonian at fixed measure argument."""
    xs = np.atleast_2d(xs)
    ps = np.atleast_2d(ps)
    n, d = xs.shape

    def H(x, p):
        vals, _ = hamiltonian_min_many(rh, x, p, nu)
        return vals

    h0 = H(xs, ps)
    hpp = np.zeros((n, d, d))
    hxx = np.zeros((n, d, d))
    hxp = np.zeros((n, d, d))
    eye = np.eye(d) * eps
    for j in range(d):
        ej = eye[j]
        hpp[:, j, j] = (H(xs, ps + ej) - 2 * h0 + H(xs, ps - ej)) / eps**2
        hxx[:, j, j] = (H(xs + ej, ps) - 2 * h0 + H(xs - ej, ps)) / eps**2
        for l in range(d):
            el = eye[l]
            hxp[:, j, l] = (
                H(xs + ej, ps + el) - H(xs + ej, ps - el) - H(xs - ej, ps + el) + H(xs - ej, ps - el)
            ) / (4 * eps**2)
            if l > j:
                val_p = (
                    H(xs, ps + ej + el) - H(xs, ps + ej - el) - H(xs, ps - ej + el) + H(xs, ps - ej - el)
                ) / (4 * eps**2)
                hpp[:, j, l] = hpp[:, l, j] = val_p
                val_x = (
                    H(xs + ej + el, ps) - H(xs + ej - el, ps) - H(xs - ej + el, ps) + H(xs - ej - el, ps)
                ) / (4 * eps**2)
                hxx[:, j, l] = hxx[:, l, j] = val_x
    return hpp, hxx, hxp


def _mixed_measure_derivs(rh, law: JointLaw, xs, ps, eps_mu=1e-3, eps_q=5e-4):
    """Mixed derivative tables H_{x rho_s}, H_{p rho_s} of the reduced
    Hamiltonian: entry [i, j, :, :] differentiates at the base point
    (xs[i], ps[i]) against a perturbation of particle j's state (s=1) or
    second (s=2) slot, scaled by N (empirical projection of the measure
    derivative).  One fixed point is solved per perturbed ensemble."""
    xs = np.atleast_2d(xs)
    ps = np.atleast_2d(ps)
    nb, d = xs.shape
    n = len(law)
    shapes = (nb, n, d, d)
    hxr1, hxr2, hpr1, hpr2 = (np.zeros(shapes) for _ in range(4))

    def grads(states, seconds):
        pert = JointLaw.from_arrays(states, seconds, law.weights)
        nu, _, _, _ = fixed_point_law(rh, pert)
        return _dx_batch(rh, xs, ps, nu, eps=eps_q), _dp_batch(rh, xs, ps, nu, eps=eps_q)

    for j in range(n):
        for c in range(d):
            for slot, (hxr, hpr) in (("state", (hxr1, hpr1)), ("second", (hxr2, hpr2))):
                sp = np.array(law.states)
                sc = np.array(law.seconds)
                tgt = sp if slot == "state" else sc
                tgt[j, c] += eps_mu
                dxp, dpp = grads(sp, sc)
                tgt[j, c] -= 2 * eps_mu
                dxm, dpm = grads(sp, sc)
                hxr[:, j, :, c] = n * (dxp - dxm) / (2 * eps_mu)
                hpr[:, j, :, c] = n * (dpp - dpm) / (2 * eps_mu)
    return hxr1, hxr2, hpr1, hpr2


# ---------------------------------------------------------------------------
# differential forms
# ---------------------------------------------------------------------------


def _pairwise(tensor, left, right, idx):
    """E_i <left_i, tensor[i, idx(i)] right_{idx(i)}> with resampled tilde
    indices; idx=None requests the exact double expectation over (i, j)."""
    n = left.shape[0]
    if idx is None:
        vals = np.einsum("id,ijdc,jc->ij", left, tensor, right) / (n * n)
        return float(np.sum(vals))
    sel = tensor[np.arange(n), idx]
    return float(np.mean(np.sum(left * np.einsum("idc,ic->id", sel, right[idx]), axis=1)))


def ll_diff_form_H(
    rh: ReducedHamiltonian,
    phi,
    xi: ParticleEnsemble,
    eta: np.ndarray,
    gamma: np.ndarray,
    zeta: np.ndarray,
    tilde_seed: int = 0,
    exact_tilde: bool = False,
    eps_mu: float = 1e-3,
) -> float:
    """Left side of the Lasry-Lions differential-form condition for the
    reduced Hamiltonian along a feedback phi(x); nonpositivity is the
    monotonicity assertion."""
    xs = xi.points
    n, d = xs.shape
    eta, gamma, zeta = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (eta, gamma, zeta))
    if not (eta.shape == gamma.shape == zeta.shape == (n, d)):
        raise MeasureError("eta, gamma, zeta must be (n, d) arrays paired with xi")
    ps = np.atleast_2d(np.asarray(phi(xs), dtype=float))
    law = JointLaw.from_arrays(xs, ps)
    nustar, _, _, _ = fixed_point_law(rh, law)
    hpp, _, _ = _second_derivs(rh, xs, ps, nustar)
    hxr1, hxr2, hpr1, hpr2 = _mixed_measure_derivs(rh, law, xs, ps, eps_mu=eps_mu)
    idx = None if exact_tilde else independent_copy_indices(n, tilde_seed)

    quad = float(np.mean(np.einsum("id,idc,ic->i", zeta, hpp, zeta)))
    gz = gamma + zeta
    cross = (
        _pairwise(hxr1, eta, eta, idx)
        + _pairwise(hxr2, eta, gz, idx)
        + _pairwise(hpr1, gamma - zeta, eta, idx)
        + _pairwise(hpr2, gamma - zeta, gz, idx)
    )
    return quad - cross


def disp_diff_form_H(
    rh: ReducedHamiltonian,
    joint: JointEnsemble,
    gamma: np.ndarray,
    zeta: np.ndarray,
    lam: float,
    tilde_seed: int = 0,
    exact_tilde: bool = False,
    eps_mu: float = 1e-3,
) -> float:
    """Left side of the displacement lambda-monotonicity differential-form
    condition for the reduced Hamiltonian; nonpositivity is the assertion."""
    xs, ps = joint.states, joint.seconds
    n, d = xs.shape
    gamma, zeta = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (gamma, zeta))
    if not (gamma.shape == zeta.shape == (n, d)):
        raise MeasureError("gamma, zeta must be (n, d) arrays paired with the ensemble")
    law = JointLaw.from_ensemble(joint)
    nustar, _, _, _ = fixed_point_law(rh, law)
    hpp, hxx, hxp = _second_derivs(rh, xs, ps, nustar)
    hxr1, hxr2, hpr1, hpr2 = _mixed_measure_derivs(rh, law, xs, ps, eps_mu=eps_mu)
    idx = None if exact_tilde else independent_copy_indices(n, tilde_seed)

    t1 = float(np.mean(np.einsum("id,idc,ic->i", zeta, hpp, zeta)))
    t2 = -float(np.mean(np.einsum("id,idc,ic->i", gamma, hxx - 2 * lam * hxp, gamma)))
    # transposes in (base, tilde): H_{x rho_2}(tilde; base) and
    # H_{p rho_2}(tilde; base) act on the swapped index pair
    hxr2_T = np.swapaxes(np.swapaxes(hxr2, 0, 1), 2, 3)
    hpr2_T = np.swapaxes(np.swapaxes(hpr2, 0, 1), 2, 3)
    t3 = _pairwise(hpr1 - hxr2_T + 2 * lam * hpr2_T, zeta, gamma, idx)
    t3 += 2 * lam * float(np.mean(np.einsum("id,idc,ic->i", zeta, hpp, gamma)))
    t4 = _pairwise(hpr2, zeta, zeta, idx)
    t5 = -_pairwise(hxr1 - 2 * lam * hpr1, gamma, gamma, idx)
    return t1 + t2 + t3 + t4 + t5


# ---------------------------------------------------------------------------
# batch checker
# ---------------------------------------------------------------------------

KINDS = (
    "LL-U",
    "disp-U",
    "LL-H-integral",
    "LL-H-differential",
    "disp-H-integral",
    "disp-H-differential",
    "LL-Lagrangian",
)


def check(kind: str, evaluate, sampler, trials: int, tolerance: float = 1e-8, seed: int = 0) -> MonotonicityReport:
    """Evaluate a gap functional over sampled fixtures.

    `evaluate` maps a sampled argument tuple to a scalar gap; `sampler`
    maps (rng, trial index) to that tuple.  The report records the minimum
    gap and passes when it clears -tolerance.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")
    rng = make_rng(seed)
    gaps = []
    argmin = {}
    for trial in range(trials):
        args = sampler(rng, trial)
        gap = float(evaluate(*args))
        if not gaps or gap < min(gaps):
            argmin = {"trial": trial, "seed": seed}
        gaps.append(gap)
    min_gap = float(min(gaps)) if gaps else float("nan")
    verdict = bool(gaps) and min_gap >= -tolerance
    return MonotonicityReport(
        kind=kind,
        trials=trials,
        min_gap=min_gap,
        tolerance=tolerance,
        verdict=verdict,
        argmin=argmin,
        gaps=gaps,
    )
