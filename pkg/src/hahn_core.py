"""Hahn calculus primitives.

Parameters (q, omega), sigma-orbit geometry, truncated lattices and the
functions stored on them, the Hahn difference operator, the power rule and the
q,omega-exponential. Everything here is immutable and side-effect free.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Optional

import numpy as np

from src.errors import (
    FixedPointError,
    LatticeMismatchError,
    NonConvergenceError,
    OrbitRangeError,
    ParameterError,
)

logger = logging.getLogger(__name__)

RealFunction = Callable[[float], float]

# |t - omega0| <= FIXED_POINT_RTOL * max(1, |omega0|) counts as t == omega0
FIXED_POINT_RTOL = 1e-12
FIXED_POINT_STEP_SCALE = 1e-6

ORBIT_NAMES = ('a', 'b')


@dataclass(frozen=True)
class HahnParams:
    """The pair (q, omega) with 0 < q < 1 and omega >= 0."""

    q: float
    omega: float
    omega0: float = field(init=False)

    def __post_init__(self):
        q = float(self.q)
        omega = float(self.omega)
        if not (0.0 < q < 1.0):
            raise ParameterError(f"q must lie strictly inside (0, 1), got {q!r}")
        if not math.isfinite(omega) or omega < 0.0:
            raise ParameterError(f"omega must be a finite value >= 0, got {omega!r}")
        object.__setattr__(self, 'q', q)
        object.__setattr__(self, 'omega', omega)
        object.__setattr__(self, 'omega0', omega / (1.0 - q))


@dataclass(frozen=True)
class Orbit:
    """Truncated sigma-orbit [s, sigma(s), ..., sigma^N(s)]."""

    anchor: float
    depth: int
    points: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Lattice:
    """Two truncated orbits of [a, b]_{q,omega} plus the limit point omega0."""

    params: HahnParams
    a: float
    b: float
    orbit_a: Orbit
    orbit_b: Orbit

    @property
    def depth(self) -> int:
        return self.orbit_a.depth

    @property
    def omega0(self) -> float:
        return self.params.omega0

    def orbit(self, name: str) -> Orbit:
        if name == 'a':
            return self.orbit_a
        if name == 'b':
            return self.orbit_b
        raise ParameterError(f"orbit must be 'a' or 'b', got {name!r}")

    def matches(self, other: 'Lattice') -> bool:
        return (self.params == other.params and self.a == other.a
                and self.b == other.b and self.depth == other.depth)


class GridRow(NamedTuple):
    orbit: str
    k: int
    t: float
    y: float


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real values of an unknown function on every stored lattice point.

    The value at omega0 is kept as its own entry; it is never extrapolated here.
    """

    lattice: Lattice
    values_a: np.ndarray
    values_b: np.ndarray
    value_omega0: float

    def __post_init__(self):
        expected = self.lattice.depth + 1
        for name in ORBIT_NAMES:
            arr = np.array(getattr(self, f'values_{name}'), dtype=float)
            if arr.shape != (expected,):
                raise LatticeMismatchError(
                    f"values_{name} has shape {arr.shape}, lattice needs ({expected},)")
            arr.setflags(write=False)
            object.__setattr__(self, f'values_{name}', arr)
        object.__setattr__(self, 'value_omega0', float(self.value_omega0))

    def values(self, name: str) -> np.ndarray:
        self.lattice.orbit(name)
        return self.values_a if name == 'a' else self.values_b

    def rows(self) -> Iterator[GridRow]:
        """Yield every stored orbit point as (orbit, k, t, y)."""
        for name in ORBIT_NAMES:
            points = self.lattice.orbit(name).points
            vals = self.values(name)
            for k, t in enumerate(points):
                yield GridRow(name, k, t, float(vals[k]))


def sigma(params: HahnParams, t: float) -> float:
    return params.q * t + params.omega


def q_bracket(params: HahnParams, k: int) -> float:
    """The q-analogue [k]_q = (1 - q^k) / (1 - q)."""
    if k < 0:
        raise ParameterError(f"q_bracket needs k >= 0, got {k}")
    return (1.0 - params.q ** k) / (1.0 - params.q)


def sigma_k(params: HahnParams, t: float, k: int) -> float:
    """sigma composed k times; negative k applies the inverse map."""
    if k >= 0:
        return params.q ** k * t + params.omega * q_bracket(params, k)
    m = -k
    scale = params.q ** m
    if scale == 0.0:
        raise OrbitRangeError(f"q^{m} underflows, cannot invert {m} sigma steps")
    result = (t - params.omega * q_bracket(params, m)) / scale
    if not math.isfinite(result):
        raise OrbitRangeError(f"inverse orbit step k={k} overflows from t={t!r}")
    return result


def is_fixed_point(params: HahnParams, t: float) -> bool:
    omega0 = params.omega0
    return abs(t - omega0) <= FIXED_POINT_RTOL * max(1.0, abs(omega0))


def default_fixed_point_step(params: HahnParams) -> float:
    return FIXED_POINT_STEP_SCALE * max(1.0, abs(params.omega0))


def hahn_derivative_info(f: RealFunction, params: HahnParams, t: float,
                         fixed_point_step: Optional[float] = None) -> tuple[float, bool]:
    """Hahn difference quotient of f at t.

    Returns:
        (value, approximate). At omega0 the value is a central finite
        difference estimate of f'(omega0) and approximate is True.
    """
    if is_fixed_point(params, t):
        h = fixed_point_step if fixed_point_step is not None else default_fixed_point_step(params)
        if h <= 0.0:
            raise ParameterError(f"fixed_point_step must be positive, got {h!r}")
        omega0 = params.omega0
        return (f(omega0 + h) - f(omega0 - h)) / (2.0 * h), True

    denom = (params.q - 1.0) * t + params.omega
    if abs(denom) < np.finfo(float).tiny:
        raise FixedPointError(
            f"Hahn quotient denominator underflows at t={t!r} (omega0={params.omega0!r})")
    return (f(sigma(params, t)) - f(t)) / denom, False


def hahn_derivative(f: RealFunction, params: HahnParams, t: float,
                    fixed_point_step: Optional[float] = None) -> float:
    return hahn_derivative_info(f, params, t, fixed_point_step)[0]


def hahn_second_derivative(f: RealFunction, params: HahnParams, t: float,
                           fixed_point_step: Optional[float] = None) -> float:
    """D[D[f]](t)."""
    def first(s: float) -> float:
        return hahn_derivative(f, params, s, fixed_point_step)

    return hahn_derivative(first, params, t, fixed_point_step)


def grid_derivative(gf: GridFunction, orbit: str, k: int) -> float:
    """Hahn quotient restricted to the lattice, using the sigma-neighbour value."""
    points = gf.lattice.orbit(orbit).points
    values = gf.values(orbit)
    if not 0 <= k < len(points) - 1:
        raise IndexError(f"grid_derivative needs 0 <= k < {len(points) - 1}, got {k}")
    params = gf.lattice.params
    denom = (params.q - 1.0) * points[k] + params.omega
    if denom == 0.0:
        raise FixedPointError(f"orbit {orbit} point {k} sits on omega0")
    return float((values[k + 1] - values[k]) / denom)


def power_rule(params: HahnParams, a_coef: float, b_coef: float, n: int, t: float) -> float:
    """Closed form of D[(a t + b)^n](t) for t != omega0."""
    if n < 1:
        raise ParameterError(f"power_rule needs n >= 1, got {n}")
    if is_fixed_point(params, t):
        raise ParameterError("power_rule is not defined at omega0")
    shifted = a_coef * sigma(params, t) + b_coef
    base = a_coef * t + b_coef
    return a_coef * sum(shifted ** k * base ** (n - k - 1) for k in range(n))


class ExpResult(NamedTuple):
    value: float
    terms: int
    collapsed: bool


def qw_exponential(params: HahnParams, z: float, t: float, tol: float = 1e-14,
                   max_terms: int = 100_000) -> ExpResult:
    """Truncated product E(z, t) = prod_k (1 + z q^k (t(1-q) - omega)).

    Stops once the deviations of all remaining factors sum to less than tol,
    which bounds the relative change the dropped factors could make.
    A factor that is exactly zero collapses the product; that is reported
    through ``collapsed`` rather than raised.
    """
    if tol <= 0.0:
        raise ParameterError(f"tol must be positive, got {tol!r}")
    if is_fixed_point(params, t):
        return ExpResult(1.0, 0, False)

    x = t * (1.0 - params.q) - params.omega
    if z == 0.0 or x == 0.0:
        return ExpResult(1.0, 0, False)

    product = 1.0
    deviation = z * x
    # sum over j >= 0 of |deviation| q^j
    remaining_scale = 1.0 / (1.0 - params.q)
    for k in range(max_terms):
        factor = 1.0 + deviation
        if factor == 0.0:
            return ExpResult(0.0, k + 1, True)
        product *= factor
        deviation *= params.q
        if abs(deviation) * remaining_scale < tol:
            return ExpResult(product, k + 1, False)
    raise NonConvergenceError(
        f"q,omega-exponential did not settle within {max_terms} factors", max_terms, product)


def qw_exponential_values(params: HahnParams, z: float, t: np.ndarray,
                          tol: float = 1e-14, max_terms: int = 100_000) -> np.ndarray:
    """E(z, t) for an array of points.

    Uses log E = sum_m (-1)^(m+1) a^m / (m (1 - q^m)) with a = z(t(1-q) - omega)
    when every |a| is below 1/2, otherwise the scalar product point by point.
    """
    t = np.asarray(t, dtype=float)
    a = z * (t * (1.0 - params.q) - params.omega)
    if t.size == 0:
        return np.ones_like(t)
    if np.max(np.abs(a)) >= 0.5:
        flat = [qw_exponential(params, z, float(s), tol, max_terms).value for s in t.ravel()]
        return np.array(flat, dtype=float).reshape(t.shape)

    log_value = np.zeros_like(a)
    power = np.ones_like(a)
    for m in range(1, max_terms + 1):
        power = power * a
        term = power / (m * (1.0 - params.q ** m))
        log_value += term if m % 2 else -term
        if np.max(np.abs(term)) < tol:
            return np.exp(log_value)
    raise NonConvergenceError(
        f"q,omega-exponential series did not settle within {max_terms} terms", max_terms)


def orbit(params: HahnParams, s: float, depth: int) -> Orbit:
    points = tuple(sigma_k(params, s, k) for k in range(depth + 1))
    return Orbit(anchor=float(s), depth=depth, points=points)


def build_lattice(params: HahnParams, a: float, b: float, depth: int) -> Lattice:
    if not a < b:
        raise ParameterError(f"interval needs a < b, got a={a!r}, b={b!r}")
    if int(depth) != depth or depth < 1:
        raise ParameterError(f"depth must be an integer >= 1, got {depth!r}")
    depth = int(depth)
    if params.omega == 0.0 and 0.0 in (a, b):
        logger.debug("orbit anchored at omega0 = 0 is constant")
    return Lattice(params=params, a=float(a), b=float(b),
                   orbit_a=orbit(params, a, depth), orbit_b=orbit(params, b, depth))


def grid_from_function(lattice: Lattice, f: RealFunction) -> GridFunction:
    """Sample f on every lattice point, including omega0."""
    return GridFunction(
        lattice=lattice,
        values_a=np.array([f(t) for t in lattice.orbit_a.points], dtype=float),
        values_b=np.array([f(t) for t in lattice.orbit_b.points], dtype=float),
        value_omega0=f(lattice.omega0),
    )


def sup_norm(gf: GridFunction) -> float:
    return float(max(np.max(np.abs(gf.values_a)), np.max(np.abs(gf.values_b)),
                     abs(gf.value_omega0)))
