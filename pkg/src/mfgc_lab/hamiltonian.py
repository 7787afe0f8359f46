"""Reduced Hamiltonian machinery: pointwise minimization of the
pre-Hamiltonian, the fixed-point map on joint state-control laws, and
derivative evaluation (finite differences in state/momentum plus an
empirical-projection estimator for measure derivatives)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import JointEnsemble
from .models import JointLaw, LagrangianModel


class ConvergenceError(RuntimeError):
    """Iteration failed to reach its tolerance within the cap."""


@dataclass(frozen=True)
class ReducedHamiltonian:
    """A Lagrangian model together with fixed-point and finite-difference
    settings for evaluating the reduced Hamiltonian."""

    model: LagrangianModel
    theta_phi: float = 1.0
    tol_phi: float = 1e-12
    max_iter_phi: int = 500
    eps_x: float = 1e-5
    eps_p: float = 1e-5
    eps_mu: float = 1e-5
    newton_tol: float = 1e-10
    newton_max_iter: int = 60
    a_max: float = 1e3

    def __post_init__(self):
        if not (0.0 < self.theta_phi <= 1.0):
            raise ValueError("damping theta_phi must lie in (0, 1]")
        if self.tol_phi <= 0:
            raise ValueError("tol_phi must be positive")


# ---------------------------------------------------------------------------
# pointwise minimization
# ---------------------------------------------------------------------------


def _minimize_controls(rh: ReducedHamiltonian, xs, ps, nu: JointLaw, a0=None):
    """Vectorized minimizer of a -> h(x, p, nu, a) for a batch of (x, p).

    Newton on da_h when analytic control derivatives exist, otherwise
    coordinate-wise golden-section on [-a_max, a_max].
    """
    m = rh.model
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    n, d = xs.shape
    if m.da_h is not None and m.daa_h is not None:
        a = np.zeros((n, d)) if a0 is None else np.array(a0, dtype=float)
        for _ in range(rh.newton_max_iter):
            grad = m.da_h(xs, ps, a, nu)
            hess = m.daa_h(xs, ps, a, nu)
            if d == 1:
                step = grad / hess[:, :, 0]
            else:
                step = np.linalg.solve(hess, grad[..., None])[..., 0]
            a = a - step
            if np.max(np.abs(m.da_h(xs, ps, a, nu))) <= rh.newton_tol:
                return a
        raise ConvergenceError("control Newton iteration did not converge")
    return _golden_controls(rh, xs, ps, nu)


def _golden_controls(rh: ReducedHamiltonian, xs, ps, nu: JointLaw):
    m = rh.model
    n, d = xs.shape
    a = np.zeros((n, d))
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    for _ in range(3):  # coordinate sweeps
        for j in range(d):
            lo = np.full(n, -rh.a_max)
            hi = np.full(n, rh.a_max)
            while np.max(hi - lo) > max(rh.newton_tol, 1e-12):
                c = hi - invphi * (hi - lo)
                e = lo + invphi * (hi - lo)
                ac = a.copy()
                ac[:, j] = c
                ae = a.copy()
                ae[:, j] = e
                fc = m.h(xs, ps, ac, nu)
                fe = m.h(xs, ps, ae, nu)
                left = fc < fe
                hi = np.where(left, e, hi)
                lo = np.where(left, lo, c)
            a[:, j] = 0.5 * (lo + hi)
    return a


def hamiltonian_min(rh: ReducedHamiltonian, x, p, nu: JointEnsemble | JointLaw):
    """Minimize h(x, p, nu, .) : returns (H, phi) at a single (x, p)."""
    law = nu if isinstance(nu, JointLaw) else JointLaw.from_ensemble(nu)
    xs = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    ps = np.atleast_1d(np.asarray(p, dtype=float))[None, :]
    a = _minimize_controls(rh, xs, ps, law)
    H = rh.model.h(xs, ps, a, law)[0]
    return float(H), a[0]


def hamiltonian_min_many(rh: ReducedHamiltonian, xs, ps, law: JointLaw, a0=None):
    """Batch variant: (H array, control array) at fixed measure argument."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    a = _minimize_controls(rh, xs, ps, law, a0=a0)
    H = rh.model.h(xs, ps, a, law)
    return H, a


# ---------------------------------------------------------------------------
# fixed point of the joint-law map
# ---------------------------------------------------------------------------


def fixed_point_law(rh: ReducedHamiltonian, rho: JointLaw, a0=None, accelerate: bool = False):
    """Fixed point of nu -> law(xi, phi(xi, eta, nu)) over a weighted joint
    (state, momentum) law; returns (nu*, controls, residual, iterations).

    The residual is the paired root-mean-square control update, an upper
    bound for W_2 between successive iterates sharing the first marginal.
    With `accelerate`, a weighted vector secant (Aitken-type) step is taken
    every third iterate, exact for affine iteration maps whose error evolves
    along one direction (as in linear-quadratic models); plain damped
    iteration otherwise.
    """
    xs, ps, w = rho.states, rho.seconds, rho.weights
    a = np.array(ps) * 0.0 if a0 is None else np.array(a0, dtype=float)
    nu = JointLaw.from_arrays(xs, a, w)
    last_gap = np.inf
    history = [a]
    for it in range(1, rh.max_iter_phi + 1):
        a_new = _minimize_controls(rh, xs, ps, nu, a0=a)
        a_next = rh.theta_phi * a_new + (1.0 - rh.theta_phi) * a
        gap = float(np.sqrt(np.sum(w * np.sum((a_next - a) ** 2, axis=1))))
        a = a_next
        if accelerate:
            history.append(a)
            if len(history) == 3:
                a2, a1, a0_ = history
                d1 = a1 - a0_
                d2 = a2 - a1
                dd = d2 - d1
                # weighted secant extrapolation: exact whenever the error
                # evolves along a single direction (affine rank-one maps)
                denom = float(np.sum(w * np.sum(dd * dd, axis=1)))
                if denom > 1e-30 * max(1.0, float(np.sum(w * np.sum(d2 * d2, axis=1)))):
                    coef = float(np.sum(w * np.sum(d2 * dd, axis=1))) / denom
                    a = a2 - coef * d2
                history = [a]
        nu = JointLaw.from_arrays(xs, a, w)
        if gap <= rh.tol_phi or gap == 0.0:
            return nu, a, gap, it
        if gap >= last_gap and gap < 1e-9:
            # round-off stall below any useful tolerance: accept
            return nu, a, gap, it
        last_gap = gap
    raise ConvergenceError(
        f"joint-law fixed point did not converge in {rh.max_iter_phi} iterations "
        f"(last gap {last_gap:.3e})"
    )


def fixed_point_phi(rh: ReducedHamiltonian, rho: JointEnsemble) -> JointEnsemble:
    """Phi(rho): the self-consistent joint (state, control) law for an
    equal-weight joint (state, momentum) ensemble; first marginal preserved
    bitwise."""
    law = JointLaw.from_ensemble(rho)
    _, a, _, _ = fixed_point_law(rh, law)
    return JointEnsemble(np.hstack([rho.states, a]))


# ---------------------------------------------------------------------------
# reduced Hamiltonian and derivatives
# ---------------------------------------------------------------------------


def reduced_ham(rh: ReducedHamiltonian, x, p, rho: JointEnsemble | JointLaw) -> float:
    """H(x, p, Phi(rho)): Hamiltonian at the fixed point of the joint law."""
    law = rho if isinstance(rho, JointLaw) else JointLaw.from_ensemble(rho)
    nustar, _, _, _ = fixed_point_law(rh, law)
    H, _ = hamiltonian_min(rh, x, p, nustar)
    return H


def reduced_ham_many(rh: ReducedHamiltonian, xs, ps, rho: JointEnsemble | JointLaw):
    """Batch reduced Hamiltonian with one shared fixed point; returns
    (H array, minimizing controls, nu*)."""
    law = rho if isinstance(rho, JointLaw) else JointLaw.from_ensemble(rho)
    nustar, _, _, _ = fixed_point_law(rh, law)
    H, a = hamiltonian_min_many(rh, xs, ps, nustar)
    return H, a, nustar


def reduced_ham_grad(rh: ReducedHamiltonian, x, p, rho: JointEnsemble | JointLaw):
    """(dH/dx, dH/dp) by central differences at fixed Phi(rho).

    Phi(rho) does not depend on the query point, so the measure fixed point
    is solved once and reused by all stencil evaluations.
    """
    law = rho if isinstance(rho, JointLaw) else JointLaw.from_ensemble(rho)
    nustar, _, _, _ = fixed_point_law(rh, law)
    return _grad_at_fixed_nu(rh, x, p, nustar)


def _grad_at_fixed_nu(rh: ReducedHamiltonian, x, p, nustar: JointLaw):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    d = x.size
    xs, ps = [], []
    for j in range(d):
        ex = np.zeros(d)
        ex[j] = rh.eps_x
        xs += [x + ex, x - ex]
        ps += [p, p]
    for j in range(d):
        ep = np.zeros(d)
        ep[j] = rh.eps_p
        xs += [x, x]
        ps += [p + ep, p - ep]
    H, _ = hamiltonian_min_many(rh, np.asarray(xs), np.asarray(ps), nustar)
    dx = np.array([(H[2 * j] - H[2 * j + 1]) / (2 * rh.eps_x) for j in range(d)])
    off = 2 * d
    dp = np.array([(H[off + 2 * j] - H[off + 2 * j + 1]) / (2 * rh.eps_p) for j in range(d)])
    return dx, dp


def grad_many(rh: ReducedHamiltonian, xs, ps, rho: JointEnsemble | JointLaw, eps_x=None, eps_p=None):
    """Batch central-difference gradients (dxH, dpH) sharing one fixed point."""
    law = rho if isinstance(rho, JointLaw) else JointLaw.from_ensemble(rho)
    nustar, _, _, _ = fixed_point_law(rh, law)
    hx = rh.eps_x if eps_x is None else eps_x
    hp = rh.eps_p if eps_p is None else eps_p
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    n, d = xs.shape
    dxH = np.zeros((n, d))
    dpH = np.zeros((n, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = hx
        Hp, _ = hamiltonian_min_many(rh, xs + e, ps, nustar)
        Hm, _ = hamiltonian_min_many(rh, xs - e, ps, nustar)
        dxH[:, j] = (Hp - Hm) / (2 * hx)
        e = np.zeros(d)
        e[j] = hp
        Hp, _ = hamiltonian_min_many(rh, xs, ps + e, nustar)
        Hm, _ = hamiltonian_min_many(rh, xs, ps - e, nustar)
        dpH[:, j] = (Hp - Hm) / (2 * hp)
    return dxH, dpH


def drift_field(rh: ReducedHamiltonian, xs, ps, rho: JointLaw):
    """dH/dp by the envelope identity dpH = b(x, phi*, Phi(rho)); exact and
    cheap, the solver lane's drift evaluator. Returns (drift, controls, nu*)."""
    nustar, _, _, _ = fixed_point_law(rh, rho)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    _, a = hamiltonian_min_many(rh, xs, ps, nustar)
    return rh.model.b(xs, a, nustar), a, nustar


def lions_derivative_fd(
    func,
    rho: JointEnsemble,
    particle_index: int,
    coordinate: int,
    which: str = "second",
    eps: float = 1e-5,
    central: bool = False,
) -> float:
    """Empirical projection of the Lions derivative of a joint-law functional:
    perturb one particle's chosen slot coordinate and scale by N."""
    if which not in ("state", "second"):
        raise ValueError("which must be 'state' or 'second'")
    n = len(rho)
    d = rho.dim
    col = coordinate if which == "state" else d + coordinate
    base = np.array(rho.pairs)

    def at(step):
        pts = base.copy()
        pts[particle_index, col] += step
        val = func(JointEnsemble(pts))
        if not np.isfinite(val):
            raise ValueError("functional returned a non-finite value under perturbation")
        return val

    if central:
        return n * (at(eps) - at(-eps)) / (2 * eps)
    f0 = func(rho)
    if not np.isfinite(f0):
        raise ValueError("functional not finite at the base ensemble")
    return n * (at(eps) - f0) / eps


# ---------------------------------------------------------------------------
# concavity probe
# ---------------------------------------------------------------------------


def concavity_probe(rh: ReducedHamiltonian, samples, eps_pp: float = 1e-3, eps_prho: float = 1e-3):
    """Estimate (c0_hat, c1_hat): the concavity floor of -d2H/dp2 and the
    ceiling of the mixed momentum/control-law derivative, over a sample set
    of (x, p, rho) triples. Report-only: never overrides declared constants.
    """
    c0_hat = np.inf
    c1_hat = 0.0
    count = 0
    for x, p, rho in samples:
        law = rho if isinstance(rho, JointLaw) else JointLaw.from_ensemble(rho)
        nustar, _, _, _ = fixed_point_law(rh, law)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        d = x.size
        # second differences of H in p at fixed nu*
        hess = np.zeros((d, d))
        H0, _ = hamiltonian_min(rh, x, p, nustar)
        for j in range(d):
            ej = np.zeros(d)
            ej[j] = eps_pp
            Hp, _ = hamiltonian_min(rh, x, p + ej, nustar)
            Hm, _ = hamiltonian_min(rh, x, p - ej, nustar)
            hess[j, j] = (Hp - 2 * H0 + Hm) / eps_pp**2
            for l in range(j + 1, d):
                el = np.zeros(d)
                el[l] = eps_pp
                Hpp, _ = hamiltonian_min(rh, x, p + ej + el, nustar)
                Hpm, _ = hamiltonian_min(rh, x, p + ej - el, nustar)
                Hmp, _ = hamiltonian_min(rh, x, p - ej + el, nustar)
                Hmm, _ = hamiltonian_min(rh, x, p - ej - el, nustar)
                hess[j, l] = hess[l, j] = (Hpp - Hpm - Hmp + Hmm) / (4 * eps_pp**2)
        c0_hat = min(c0_hat, float(np.min(np.linalg.eigvalsh(-hess))))

        # |d_{p rho_2} H| via a Lions-derivative of dH/dp
        rho_e = rho if isinstance(rho, JointEnsemble) else JointEnsemble(
            np.hstack([law.states, law.seconds])
        )
        n = len(rho_e)
        for j in range(d):
            for l in range(d):
                def dp_of(nu_e, j=j):
                    ej = np.zeros(d)
                    ej[j] = eps_pp
                    Hp = reduced_ham(rh, x, p + ej, nu_e)
                    Hm = reduced_ham(rh, x, p - ej, nu_e)
                    return (Hp - Hm) / (2 * eps_pp)

                for i in range(n):
                    val = lions_derivative_fd(
                        dp_of, rho_e, i, l, which="second", eps=eps_prho, central=True
                    )
                    c1_hat = max(c1_hat, abs(val))
        count += 1
    defined = count > 0
    return {
        "c0_hat": float(c0_hat) if defined else float("nan"),
        "c1_hat": float(c1_hat) if defined else float("nan"),
        "C1_hat": float(c0_hat - c1_hat) if defined else float("nan"),
        "samples": count,
        "defined": defined,
        "declared_c0": rh.model.c0,
        "declared_c1": rh.model.c1,
        "verdict": bool(defined and (c0_hat - c1_hat) > 0),
    }
