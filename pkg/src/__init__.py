"""Hahn quantum variational calculus: lattices, integrals, expressions and solvers."""

__version__ = "1.0.0"
