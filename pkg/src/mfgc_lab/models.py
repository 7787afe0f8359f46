"""Lagrangian model data: drift, running cost, terminal cost and their
derivative callbacks, plus the built-in model registry.

Callbacks are vectorized over the leading particle/grid axis and receive the
measure argument as a law object exposing weighted moments. All callbacks
must be pure and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .measures import DensityGrid1d, JointEnsemble, MeasureError, ParticleEnsemble


class ModelError(ValueError):
    """Raised on inconsistent model data or unknown registry names."""


@dataclass(frozen=True)
class JointLaw:
    """Weighted joint law on state x second-coordinate space; the measure
    argument handed to drift/cost callbacks."""

    states: np.ndarray
    seconds: np.ndarray
    weights: np.ndarray

    @staticmethod
    def from_arrays(states, seconds, weights=None) -> "JointLaw":
        s = np.asarray(states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        a = np.asarray(seconds, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if weights is None:
            w = np.full(s.shape[0], 1.0 / s.shape[0])
        else:
            w = np.asarray(weights, dtype=float)
            total = w.sum()
            if total <= 0:
                raise MeasureError("law weights must have positive mass")
            w = w / total
        return JointLaw(states=s, seconds=a, weights=w)

    @staticmethod
    def from_ensemble(nu: JointEnsemble) -> "JointLaw":
        return JointLaw.from_arrays(nu.states, nu.seconds)

    def __len__(self) -> int:
        return self.states.shape[0]

    def mean_state(self) -> np.ndarray:
        return self.weights @ self.states

    def mean_second(self) -> np.ndarray:
        return self.weights @ self.seconds

    def with_seconds(self, seconds) -> "JointLaw":
        return JointLaw.from_arrays(self.states, seconds, self.weights)


@dataclass(frozen=True)
class StateLaw:
    """Weighted law on state space; the measure argument for terminal costs."""

    points: np.ndarray
    weights: np.ndarray

    @staticmethod
    def from_arrays(points, weights=None) -> "StateLaw":
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if weights is None:
            w = np.full(p.shape[0], 1.0 / p.shape[0])
        else:
            w = np.asarray(weights, dtype=float)
            w = w / w.sum()
        return StateLaw(points=p, weights=w)

    @staticmethod
    def from_ensemble(mu: ParticleEnsemble) -> "StateLaw":
        return StateLaw.from_arrays(mu.points)

    @staticmethod
    def from_density(mu: DensityGrid1d) -> "StateLaw":
        w = mu.values * mu.dx
        w[0] *= 0.5
        w[-1] *= 0.5
        return StateLaw.from_arrays(mu.x_grid, w)

    def __len__(self) -> int:
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points


@dataclass(frozen=True)
class LagrangianModel:
    """Data (b, f, G, beta, lambda, c0, c1) of a mean-field game of controls.

    b(x, a, nu) and f(x, a, nu) take (N, d) arrays and a JointLaw; G and its
    derivatives take (N, d) arrays and a StateLaw. Optional callbacks supply
    analytic control derivatives of h = p*b + f and the state derivative of
    h at fixed control (used by the solver lane; finite differences are the
    fallback everywhere).
    """

    name: str
    dim: int
    b: Callable[[np.ndarray, np.ndarray, JointLaw], np.ndarray]
    f: Callable[[np.ndarray, np.ndarray, JointLaw], np.ndarray]
    G: Callable[[np.ndarray, StateLaw], np.ndarray]
    dxG: Callable[[np.ndarray, StateLaw], np.ndarray]
    dxxG: Callable[[np.ndarray, StateLaw], np.ndarray]
    dxmuG: Callable[[np.ndarray, StateLaw, np.ndarray], np.ndarray]
    beta: float = 0.0
    lam: float = 0.0
    c0: float = 1.0
    c1: float = 0.0
    da_h: Optional[Callable] = None
    daa_h: Optional[Callable] = None
    dx_h: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.beta < 0:
            raise ModelError("common-noise intensity beta must be >= 0")
        if self.lam < 0:
            raise ModelError("monotonicity parameter lambda must be >= 0")
        if not (self.c0 > self.c1 > 0 or (self.c0 > 0 and self.c1 == 0)):
            raise ModelError("need declared constants c0 > c1 >= 0 with c0 > 0")

    def h(self, x, p, a, nu: JointLaw):
        """Pre-Hamiltonian h(x, p, nu, a) = p . b + f, vectorized."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = np.atleast_2d(np.asarray(p, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        bv = self.b(x, a, nu)
        return np.einsum("ij,ij->i", p, bv) + self.f(x, a, nu)


def lq_model(
    name: str = "lq1d-coupled",
    k: float = 0.5,
    q: float = 0.2,
    r: float = 0.2,
    g: float = 0.5,
    s: float = 0.3,
    beta: float = 0.0,
    lam: float = 0.0,
) -> LagrangianModel:
    """1-d linear-quadratic family: b = a,
    f = a^2/2 + k a abar(nu) + q x^2/2 + r x xbar(nu),
    G = g x^2/2 + s x mbar(mu).

    The control-coupling strength k gives kappa = k/(1+k); the declared
    concavity constants are c0 = 1 and c1 = kappa.
    """
    kappa = k / (1.0 + k)

    def b(x, a, nu):
        return a

    def f(x, a, nu):
        abar = nu.mean_second()[0]
        xbar = nu.mean_state()[0]
        return (
            0.5 * a[:, 0] ** 2
            + k * a[:, 0] * abar
            + 0.5 * q * x[:, 0] ** 2
            + r * x[:, 0] * xbar
        )

    def G(x, mu):
        return 0.5 * g * x[:, 0] ** 2 + s * x[:, 0] * mu.mean()[0]

    def dxG(x, mu):
        return (g * x[:, 0] + s * mu.mean()[0])[:, None]

    def dxxG(x, mu):
        return np.full((x.shape[0], 1, 1), g)

    def dxmuG(x, mu, xt):
        return np.full((x.shape[0], 1, 1), s)

    def da_h(x, p, a, nu):
        abar = nu.mean_second()[0]
        return (p[:, 0] + a[:, 0] + k * abar)[:, None]

    def daa_h(x, p, a, nu):
        return np.ones((x.shape[0], 1, 1))

    def dx_h(x, p, a, nu):
        xbar = nu.mean_state()[0]
        return (q * x[:, 0] + r * xbar)[:, None]

    return LagrangianModel(
        name=name,
        dim=1,
        b=b,
        f=f,
        G=G,
        dxG=dxG,
        dxxG=dxxG,
        dxmuG=dxmuG,
        beta=beta,
        lam=lam,
        c0=1.0,
        c1=kappa if kappa > 0 else 0.0,
        da_h=da_h,
        daa_h=daa_h,
        dx_h=dx_h,
        params=dict(k=k, q=q, r=r, g=g, s=s, beta=beta, lam=lam, kappa=kappa),
    )


def zero_drift_model(g: float = 0.0, beta: float = 0.0) -> LagrangianModel:
    """Degenerate fixture: b = 0, f = a^2/2, G = g x. The reduced
    Hamiltonian is p-independent and the state is pure Brownian motion."""

    def b(x, a, nu):
        return np.zeros_like(a)

    def f(x, a, nu):
        return 0.5 * a[:, 0] ** 2

    def G(x, mu):
        return g * x[:, 0]

    def dxG(x, mu):
        return np.full((x.shape[0], 1), g)

    def dxxG(x, mu):
        return np.zeros((x.shape[0], 1, 1))

    def dxmuG(x, mu, xt):
        return np.zeros((x.shape[0], 1, 1))

    def da_h(x, p, a, nu):
        return a

    def daa_h(x, p, a, nu):
        return np.ones((x.shape[0], 1, 1))

    def dx_h(x, p, a, nu):
        return np.zeros((x.shape[0], 1))

    return LagrangianModel(
        name="zero-drift",
        dim=1,
        b=b,
        f=f,
        G=G,
        dxG=dxG,
        dxxG=dxxG,
        dxmuG=dxmuG,
        beta=beta,
        c0=1.0,
        c1=0.0,
        da_h=da_h,
        daa_h=daa_h,
        dx_h=dx_h,
        params=dict(g=g, beta=beta),
    )


_REGISTRY: dict[str, Callable[..., LagrangianModel]] = {}


def register_model(name: str, builder: Callable[..., LagrangianModel]) -> None:
    _REGISTRY[name] = builder


def model_names() -> list[str]:
    return sorted(_REGISTRY)


def build_model(name: str, **params) -> LagrangianModel:
    if name not in _REGISTRY:
        raise ModelError(f"unknown model {name!r}; registry: {model_names()}")
    return _REGISTRY[name](**params)


register_model("lq1d", lambda **p: lq_model(name="lq1d", **{
    "k": 0.0, "q": 0.0, "r": 0.0, "g": 1.0, "s": 0.0, **p}))
register_model("lq1d-coupled", lambda **p: lq_model(name="lq1d-coupled", **p))
register_model("zero-drift", lambda **p: zero_drift_model(**p))
