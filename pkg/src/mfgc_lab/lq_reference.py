"""Closed-form reference solution for the one-dimensional linear-quadratic
family: the equilibrium value function is quadratic, u(t, x) = A(t) x^2 / 2
+ B(t) x m(t) + c(t), with Riccati coefficients solved here by dense RK4.

Used as the accuracy oracle for the grid and particle solvers and for the
measure-derivative estimators; it never feeds back into the solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import LagrangianModel


@dataclass
class LQReference:
    """Riccati-based equilibrium solution for an ``lq_model`` instance.

    Coefficient ODEs on [t0, T] (kappa = k / (1 + k), D = B - kappa (A + B)):

        A' = A^2 - q,                         A(T) = g
        B' = (1 - kappa)(A + B) B + A D - r,  B(T) = s
        m' = -(1 - kappa)(A + B) m            (mean, forward)
        v' = -2 A v + 1                       (variance, forward)
        c' = -A / 2 + D^2 m^2 / 2,            c(T) = 0

    A and B are mean-independent; c is integrated per initial mean.
    """

    model: LagrangianModel
    t0: float = 0.0
    horizon: float = 1.0
    steps: int = 4000
    _grid: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.horizon <= self.t0:
            raise ValueError("horizon must exceed t0")
        if "kappa" not in self.model.params:
            raise ValueError("LQReference requires a model from lq_model()")
        self._solve_riccati()

    # -- coefficient ODEs ---------------------------------------------------

    def _solve_riccati(self):
        P = self.model.params
        q, r, g, s, kappa = P["q"], P["r"], P["g"], P["s"], P["kappa"]
        n = self.steps
        ts = np.linspace(self.t0, self.horizon, n + 1)
        dt = ts[1] - ts[0]
        A = np.empty(n + 1)
        B = np.empty(n + 1)
        A[n], B[n] = g, s

        def f(y):
            a, b = y
            d = b - kappa * (a + b)
            return np.array([a * a - q, (1 - kappa) * (a + b) * b + a * d - r])

        y = np.array([g, s])
        for i in range(n, 0, -1):
            k1 = f(y)
            k2 = f(y - 0.5 * dt * k1)
            k3 = f(y - 0.5 * dt * k2)
            k4 = f(y - dt * k3)
            y = y - dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            A[i - 1], B[i - 1] = y
        # cumulative integrals for smooth-in-t flow and offset evaluation:
        #   I  = int (1 - kappa)(A + B)      (mean decay exponent)
        #   J1 = int A / 2                   (idiosyncratic-noise cost)
        #   J2 = int D^2 exp(-2 I)           (mean-interaction cost kernel)
        D = B - kappa * (A + B)
        rate = (1 - kappa) * (A + B)
        I = np.concatenate([[0.0], np.cumsum(0.5 * (rate[1:] + rate[:-1]) * dt)])
        half_a = A / 2.0
        J1 = np.concatenate([[0.0], np.cumsum(0.5 * (half_a[1:] + half_a[:-1]) * dt)])
        ker = D**2 * np.exp(-2.0 * I)
        J2 = np.concatenate([[0.0], np.cumsum(0.5 * (ker[1:] + ker[:-1]) * dt)])
        self._grid = {"t": ts, "A": A, "B": B, "kappa": kappa, "I": I, "J1": J1, "J2": J2}

    def _interp(self, key, t):
        return float(np.interp(t, self._grid["t"], self._grid[key]))

    def A(self, t: float) -> float:
        return self._interp("A", t)

    def B(self, t: float) -> float:
        return self._interp("B", t)

    def sup_B(self, t_from: float = None) -> float:
        """sup over [t_from, T] of |B(t)|; the flow Lipschitz bound."""
        ts = self._grid["t"]
        mask = ts >= (self.t0 if t_from is None else t_from - 1e-12)
        return float(np.max(np.abs(self._grid["B"][mask])))

    # -- mean / variance flow ----------------------------------------------

    def mean_flow(self, m_from: float, t: float, t_from: float = None) -> float:
        """Equilibrium mean at time t from mean m_from at t_from (default t0):
        m' = -(1 - kappa)(A + B) m, via the interpolated decay exponent."""
        lo = self.t0 if t_from is None else t_from
        return m_from * np.exp(-(self._interp("I", t) - self._interp("I", lo)))

    def variance_flow(self, v0: float, t: float) -> float:
        """v' = -2 A v + 1 integrated forward with RK4 on the stored grid."""
        ts, A = self._grid["t"], self._grid["A"]
        v = v0
        for i in range(len(ts) - 1):
            if ts[i] >= t:
                break
            dt = min(ts[i + 1], t) - ts[i]
            if dt <= 0:
                break
            a0, a1 = A[i], A[i + 1]
            am = 0.5 * (a0 + a1)

            def f(vv, aa):
                return -2 * aa * vv + 1.0

            k1 = f(v, a0)
            k2 = f(v + 0.5 * dt * k1, am)
            k3 = f(v + 0.5 * dt * k2, am)
            k4 = f(v + dt * k3, a1)
            v = v + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        return v

    # -- value function -----------------------------------------------------

    def _c_of_t(self, m_t: float, t: float) -> float:
        """c(t) from c' = -A/2 + D^2 m^2 / 2, c(T) = 0, with m the mean flow
        started at (t, m_t).  The mean factorizes, m(s)^2 = m_t^2
        exp(2 I(t)) exp(-2 I(s)), so c(t) reads off the cumulative tables:
        c = (J1(T) - J1(t)) - m_t^2 exp(2 I(t)) (J2(T) - J2(t)) / 2."""
        T = self.horizon
        j1 = self._interp("J1", T) - self._interp("J1", t)
        j2 = self._interp("J2", T) - self._interp("J2", t)
        return j1 - 0.5 * m_t**2 * np.exp(2.0 * self._interp("I", t)) * j2

    def u(self, t: float, x, m_t: float):
        """Equilibrium value at (t, x) when the state mean at time t is m_t."""
        x = np.asarray(x, dtype=float)
        return 0.5 * self.A(t) * x**2 + self.B(t) * x * m_t + self._c_of_t(m_t, t)

    def du(self, t: float, x, m_t: float):
        """Spatial gradient A(t) x + B(t) m_t."""
        x = np.asarray(x, dtype=float)
        return self.A(t) * x + self.B(t) * m_t

    def value(self, t: float, x, m_t: float):
        """Master-field value V(t, x, mu); for this family it depends on mu
        only through the mean m_t of mu."""
        return self.u(t, x, m_t)

    def xmu_derivative(self, t: float) -> float:
        """d_x d_mu V: constant in (x, x'), equal to B(t)."""
        return self.B(t)


def zero_cost_decay(g: float, horizon: float, t: float) -> float:
    """A(t) for the q = 0 family in closed form: g / (1 + g (T - t))."""
    return g / (1.0 + g * (horizon - t))
