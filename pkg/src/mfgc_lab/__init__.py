"""Numerical laboratory for mean field games with joint state-control
interaction: measure utilities, reduced Hamiltonians, monotonicity
diagnostics, equilibrium solvers, and master-field value checks."""

__version__ = "0.1.0"
