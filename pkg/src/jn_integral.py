"""
Jackson-Norlund (q,omega) integration.

The integral anchored at omega0 is a weighted series over the sigma-orbit of
the upper limit; interval integrals are differences of two anchored series.
Also hosts the residual checkers for the fundamental theorem, integration by
parts and the positivity property.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from src.errors import LatticeMismatchError, NonConvergenceError, ParameterError
from src.hahn_core import (
    HahnParams,
    RealFunction,
    hahn_derivative,
    is_fixed_point,
    sigma,
    sigma_k,
)

logger = logging.getLogger(__name__)

QUADRATURE_MODES = ('fixed_depth', 'tail_tol')


@dataclass(frozen=True)
class QuadratureSpec:
    """Stopping rule for the defining series.

    In 'tail_tol' mode the series stops once two consecutive terms fall below
    tail_tol * (1 + |partial sum|); hitting max_terms first is an error.
    In 'fixed_depth' mode exactly max_terms terms are summed.
    """

    max_terms: int = 10_000
    tail_tol: float = 1e-13
    mode: str = 'tail_tol'

    def __post_init__(self):
        if int(self.max_terms) != self.max_terms or self.max_terms < 1:
            raise ParameterError(f"max_terms must be an integer >= 1, got {self.max_terms!r}")
        if not self.tail_tol > 0.0:
            raise ParameterError(f"tail_tol must be positive, got {self.tail_tol!r}")
        if self.mode not in QUADRATURE_MODES:
            raise ParameterError(f"mode must be one of {QUADRATURE_MODES}, got {self.mode!r}")


DEFAULT_SPEC = QuadratureSpec()


class SeriesResult(NamedTuple):
    value: float
    terms: int
    tail_estimate: float


def integral_from_omega0(f: RealFunction, params: HahnParams, x: float,
                         spec: QuadratureSpec = DEFAULT_SPEC) -> SeriesResult:
    """(x(1-q) - omega) * sum_k q^k f(sigma^k(x)), truncated per spec."""
    weight = x * (1.0 - params.q) - params.omega
    if weight == 0.0 or is_fixed_point(params, x):
        return SeriesResult(0.0, 0, 0.0)

    terms: list[float] = []
    partial = 0.0
    quiet = 0
    converged = spec.mode == 'fixed_depth'
    for k in range(spec.max_terms):
        term = params.q ** k * f(sigma_k(params, x, k))
        terms.append(term)
        partial += term
        if spec.mode == 'tail_tol':
            if abs(term) < spec.tail_tol * (1.0 + abs(partial)):
                quiet += 1
                if quiet >= 2:
                    converged = True
                    break
            else:
                quiet = 0

    total = math.fsum(terms)
    if not converged:
        raise NonConvergenceError(
            f"series at x={x!r} still above tail tolerance after {spec.max_terms} terms",
            spec.max_terms, weight * total)

    last = abs(terms[-1])
    tail = abs(weight) * last * params.q / (1.0 - params.q)
    return SeriesResult(weight * total, len(terms), tail)


def integral_info(f: RealFunction, params: HahnParams, a: float, b: float,
                  spec: QuadratureSpec = DEFAULT_SPEC) -> SeriesResult:
    """Interval integral with the combined term count and tail estimate."""
    if a == b:
        return SeriesResult(0.0, 0, 0.0)
    upper = integral_from_omega0(f, params, b, spec)
    lower = integral_from_omega0(f, params, a, spec)
    return SeriesResult(upper.value - lower.value, upper.terms + lower.terms,
                        upper.tail_estimate + lower.tail_estimate)


def integral(f: RealFunction, params: HahnParams, a: float, b: float,
             spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    return integral_info(f, params, a, b, spec).value


def grid_integral(values_a: Sequence[float], values_b: Sequence[float], params: HahnParams,
                  a: float, b: float, depth: int) -> float:
    """Truncated defining series over stored orbit values k = 0..depth."""
    va = np.asarray(values_a, dtype=float)
    vb = np.asarray(values_b, dtype=float)
    if va.shape != (depth + 1,) or vb.shape != (depth + 1,):
        raise LatticeMismatchError(
            f"grid_integral at depth {depth} needs {depth + 1} values per orbit, "
            f"got {va.shape} and {vb.shape}")
    powers = params.q ** np.arange(depth + 1)
    weight_a = a * (1.0 - params.q) - params.omega
    weight_b = b * (1.0 - params.q) - params.omega
    return float(weight_b * np.dot(powers, vb) - weight_a * np.dot(powers, va))


def fundamental_theorem_residual(f: RealFunction, params: HahnParams, a: float, b: float,
                                 spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """|int_a^b D[f] - (f(b) - f(a))|."""
    def derivative(t: float) -> float:
        return hahn_derivative(f, params, t)

    return abs(integral(derivative, params, a, b, spec) - (f(b) - f(a)))


def integration_by_parts_residual(f: RealFunction, g: RealFunction, params: HahnParams,
                                  a: float, b: float,
                                  spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    def left(t: float) -> float:
        return f(t) * hahn_derivative(g, params, t)

    def right(t: float) -> float:
        return hahn_derivative(f, params, t) * g(sigma(params, t))

    lhs = integral(left, params, a, b, spec)
    rhs = f(b) * g(b) - f(a) * g(a) - integral(right, params, a, b, spec)
    return abs(lhs - rhs)


@dataclass(frozen=True)
class PositivityDiagnosis:
    """Outcome of positivity_check; truthy when the oriented integral is >= 0.

    hypothesis_met is False when some sampled orbit value of f is negative,
    in which case a negative integral says nothing against positivity.
    """

    nonnegative: bool
    oriented_integral: float
    hypothesis_met: bool
    omega0_below: bool

    def __bool__(self) -> bool:
        return self.nonnegative


def positivity_check(f: RealFunction, params: HahnParams, bound: float,
                     spec: QuadratureSpec = DEFAULT_SPEC,
                     tolerance: float = 1e-12) -> PositivityDiagnosis:
    """Oriented integral between omega0 and bound.

    For omega0 <= bound this is int_{omega0}^{bound} f; otherwise
    int_{bound}^{omega0} f.
    """
    anchored = integral_from_omega0(f, params, bound, spec)
    omega0_below = params.omega0 <= bound
    oriented = anchored.value if omega0_below else -anchored.value
    samples = max(anchored.terms, 1)
    hypothesis_met = all(f(sigma_k(params, bound, k)) >= 0.0 for k in range(samples))
    if not hypothesis_met:
        logger.debug("positivity hypothesis not met on orbit of %r", bound)
    return PositivityDiagnosis(oriented >= -tolerance, oriented, hypothesis_met, omega0_below)


def triangle_inequality_gap(f: RealFunction, params: HahnParams, a: float, b: float,
                            spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """int_a^b |f| - |int_a^b f|.

    Negative values are legitimate: the integral carries negative weights
    on the orbit of b when a < b < omega0.
    """
    absolute = integral(lambda t: abs(f(t)), params, a, b, spec)
    return absolute - abs(integral(f, params, a, b, spec))
