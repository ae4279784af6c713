"""
Variational engine for Hahn quantum variational problems.

A problem is discretised on a truncated lattice [a, b]_{q,omega}. Each orbit
is continued past its deepest stored point by a quadratic through three of its
deepest values, so the defining series of the functional can be summed to the
quadrature tail tolerance while the unknowns stay the stored lattice values.
The two orbit continuations are required to agree in value and slope at
omega0 (continuity of y and D[y] there).

Stationary points are found by damped Newton on the first-order system with
a gradient fallback; isoperimetric problems append the constraint and solve
for the multiplier, trying the normal case before the abnormal one.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from src import expr as ex
from src.errors import (
    LatticeMismatchError,
    ParameterError,
    UsageError,
)
from src.hahn_core import (
    GridFunction,
    HahnParams,
    Lattice,
    build_lattice,
    is_fixed_point,
)
from src.jn_integral import DEFAULT_SPEC, QuadratureSpec

logger = logging.getLogger(__name__)

PARTIAL_VARS = ('y', 'Dy', 'ya', 'yb')
SENSES = ('min', 'max')
DEFAULT_MIN_STEP_SCALE = 1e-3
# projected constraint gradient below this marks an extremal of the constraint
ABNORMAL_TOL = 1e-8
ROUNDING_FACTOR = 64.0

PointParameter = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EndCondition:
    """Boundary data at one end: a fixed value, or free when value is None."""

    value: Optional[float] = None

    def __post_init__(self):
        if self.value is not None:
            value = float(self.value)
            if not math.isfinite(value):
                raise ParameterError(f"fixed boundary value must be finite, got {value!r}")
            object.__setattr__(self, 'value', value)

    @classmethod
    def fixed(cls, value: float) -> 'EndCondition':
        return cls(value)

    @classmethod
    def free(cls) -> 'EndCondition':
        return cls(None)

    @property
    def is_free(self) -> bool:
        return self.value is None

    def __str__(self):
        return 'free' if self.is_free else f'fixed:{self.value!r}'


@dataclass(frozen=True)
class BoundarySpec:
    at_a: EndCondition = EndCondition()
    at_b: EndCondition = EndCondition()


@dataclass(frozen=True)
class Constraint:
    """Integral constraint int_a^b F = gamma."""

    expr: ex.Expression
    gamma: float


@dataclass(frozen=True)
class VariationalProblem:
    """Extremize int_a^b L(t, y(qt+omega), D[y](t), y(a), y(b)) d_{q,omega}t.

    point_parameters bind names to callables evaluated on arrays of lattice
    points; they carry per-point coefficients the expression language has no
    syntax for.
    """

    params: HahnParams
    a: float
    b: float
    lagrangian: ex.Expression
    parameters: Mapping[str, float] = field(default_factory=dict)
    boundary: BoundarySpec = BoundarySpec()
    constraint: Optional[Constraint] = None
    sense: str = 'min'
    point_parameters: Mapping[str, PointParameter] = field(default_factory=dict)
    name: str = 'custom'

    def __post_init__(self):
        if not self.a < self.b:
            raise ParameterError(f"interval needs a < b, got a={self.a!r}, b={self.b!r}")
        if self.sense not in SENSES:
            raise ParameterError(f"sense must be one of {SENSES}, got {self.sense!r}")
        declared = set(self.parameters) | set(self.point_parameters)
        clash = declared & (set(ex.VARIABLES) | set(ex.FUNCTIONS))
        if clash:
            raise ParameterError(f"parameter names shadow reserved names: {sorted(clash)}")
        exprs = [self.lagrangian] + ([self.constraint.expr] if self.constraint else [])
        for node in exprs:
            unknown = ex.names(node) - set(ex.VARIABLES) - declared
            if unknown:
                raise ParameterError(f"undeclared names in {node}: {sorted(unknown)}")

    def with_lagrangian(self, lagrangian: ex.Expression) -> 'VariationalProblem':
        return dataclasses.replace(self, lagrangian=lagrangian, constraint=None)


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-10
    max_iter: int = 200
    depth: int = 60
    quadrature: QuadratureSpec = DEFAULT_SPEC
    min_step_scale: float = DEFAULT_MIN_STEP_SCALE
    restarts: int = 3
    seed: int = 0
    # None ties the two orbit continuations exactly at omega0
    omega0_tie_weight: Optional[float] = None

    def __post_init__(self):
        if self.omega0_tie_weight is not None and not self.omega0_tie_weight > 0.0:
            raise ParameterError(
                f"omega0_tie_weight must be positive or None, got {self.omega0_tie_weight!r}")
        if not self.tol > 0.0:
            raise ParameterError(f"tol must be positive, got {self.tol!r}")
        if self.max_iter < 1:
            raise ParameterError(f"max_iter must be >= 1, got {self.max_iter!r}")
        if self.depth < 2:
            raise ParameterError(f"depth must be >= 2, got {self.depth!r}")


class OrbitResiduals(NamedTuple):
    a: np.ndarray
    b: np.ndarray

    def max_abs(self) -> float:
        parts = [np.abs(r) for r in (self.a, self.b) if r.size]
        return float(max(np.max(p) for p in parts)) if parts else 0.0


@dataclass(frozen=True)
class ConvexityVerdict:
    """Sampling evidence about joint convexity of L in (y, Dy, ya, yb). Not a proof."""

    kind: str
    samples: int
    witness: Optional[dict] = None

    def sufficiency(self, sense: str = 'min') -> str:
        if self.kind == 'convex-evidence' and sense == 'min':
            return f"global minimizer supported by {self.samples} samples"
        if self.kind == 'concave-evidence' and sense == 'max':
            return f"global maximizer supported by {self.samples} samples"
        return "sufficiency not established"


@dataclass
class SolveReport:
    minimizer: GridFunction
    functional_value: float
    el_residuals: OrbitResiduals
    nbc_a: Optional[float]
    nbc_b: Optional[float]
    iterations: int
    converged: bool
    gradient_norm: float
    multiplier: Optional[float] = None
    lambda0: Optional[int] = None
    constraint_value: Optional[float] = None
    fallback_steps: int = 0
    tail_estimate: float = 0.0
    message: str = ''
    convexity: Optional[ConvexityVerdict] = None
    sense: str = 'min'

    @property
    def depth(self) -> int:
        return self.minimizer.lattice.depth

    @property
    def sufficiency(self) -> Optional[str]:
        if self.convexity is None:
            return None
        return self.convexity.sufficiency(self.sense)


# ---------------------------------------------------------------------------
# Lattice and discretisation
# ---------------------------------------------------------------------------

def working_lattice(params: HahnParams, a: float, b: float, depth: int,
                    min_step_scale: float = DEFAULT_MIN_STEP_SCALE) -> Lattice:
    """Lattice of the requested depth, shortened where orbit steps get too small.

    Second differences lose all precision once |(q-1)t_k + omega| is tiny, so
    depth is capped at the last k with a step of at least
    min_step_scale * (1 - q) * max(1, |omega0|). Never below 2.
    """
    floor = min_step_scale * (1.0 - params.q) * max(1.0, abs(params.omega0))
    usable = depth
    for anchor in (a, b):
        if is_fixed_point(params, anchor):
            continue
        first_step = abs((params.q - 1.0) * (anchor - params.omega0))
        if first_step <= floor:
            usable = min(usable, 2)
            continue
        usable = min(usable, int(math.floor(math.log(floor / first_step) / math.log(params.q))))
    usable = max(2, usable)
    if usable < depth:
        logger.info("lattice depth capped from %d to %d by orbit step size", depth, usable)
    return build_lattice(params, a, b, usable)


def _tail_terms(params: HahnParams, depth: int, spec: QuadratureSpec) -> int:
    if spec.mode == 'fixed_depth':
        return max(depth, spec.max_terms)
    needed = int(math.ceil(math.log(spec.tail_tol) / math.log(params.q)))
    if needed > spec.max_terms:
        logger.warning("series needs %d terms at q=%g, capped at max_terms=%d",
                       needed, params.q, spec.max_terms)
    return max(depth, min(needed, spec.max_terms))


def tail_nodes(q: float, depth: int) -> np.ndarray:
    """Stored indices the tail quadratic passes through, deepest last.

    Neighbouring nodes are about one halving of |t - omega0| apart, or as far
    apart as depth allows.
    """
    if depth < 2:
        raise ParameterError(f"tail continuation needs depth >= 2, got {depth}")
    spacing = max(1, min(depth // 2, int(math.ceil(math.log(0.5) / math.log(q)))))
    return depth - spacing * np.arange(2, -1, -1)


class TailQuadratic:
    """Lagrange quadratic through three nodes, in s = t - omega0."""

    def __init__(self, nodes: Sequence[float]):
        self.nodes = tuple(float(s) for s in nodes)
        self.alpha = np.empty(3)
        self.beta = np.empty(3)
        self.gamma = np.empty(3)
        for i in range(3):
            others = [self.nodes[j] for j in range(3) if j != i]
            scale = 1.0 / ((self.nodes[i] - others[0]) * (self.nodes[i] - others[1]))
            self.alpha[i] = scale
            self.beta[i] = -(others[0] + others[1]) * scale
            self.gamma[i] = others[0] * others[1] * scale

    def weights(self, s: np.ndarray) -> np.ndarray:
        """Basis values at s, shape (len(s), 3)."""
        s = np.asarray(s, dtype=float)[:, None]
        out = np.ones((s.shape[0], 3))
        for i in range(3):
            for j in range(3):
                if j != i:
                    out[:, i] *= (s[:, 0] - self.nodes[j]) / (self.nodes[i] - self.nodes[j])
        return out

    def slopes_between(self, s0: np.ndarray, s1: np.ndarray) -> np.ndarray:
        """Divided differences (l(s1) - l(s0)) / (s1 - s0), shape (len, 3)."""
        total = (np.asarray(s0) + np.asarray(s1))[:, None]
        return self.alpha[None, :] * total + self.beta[None, :]


@dataclass
class _Orbit:
    name: str
    offset: int
    degenerate: bool
    t: np.ndarray = None          # term points t_k, k = 0..K-1
    d: np.ndarray = None          # (q-1) t_k + omega
    coef: np.ndarray = None       # signed series weights
    U0: sp.csr_matrix = None      # z -> y(sigma t_k)
    U1: sp.csr_matrix = None      # z -> D[y](t_k)
    quad: Optional[TailQuadratic] = None
    tail_cols: Optional[np.ndarray] = None   # z columns of the quadratic's nodes
    point_values: dict = field(default_factory=dict)

    @property
    def terms(self) -> int:
        return 0 if self.t is None else self.t.size


class Discretization:
    """Linear maps from stored lattice values z = (values_a, values_b) to the
    per-term arguments of the integrand, with the orbit tails continued."""

    def __init__(self, problem: VariationalProblem, lattice: Lattice,
                 spec: QuadratureSpec = DEFAULT_SPEC):
        if not (lattice.params == problem.params and lattice.a == problem.a
                and lattice.b == problem.b):
            raise LatticeMismatchError("lattice does not belong to this problem")
        self.problem = problem
        self.lattice = lattice
        self.params = lattice.params
        self.N = lattice.depth
        self.size = 2 * (self.N + 1)
        # depth 1 has no quadratic continuation; the series is cut at N
        self.tail_terms = self.N if self.N < 2 else _tail_terms(self.params, self.N, spec)
        self.orbits = {}
        for index, name in enumerate(('a', 'b')):
            anchor = lattice.orbit(name).anchor
            orbit = _Orbit(name, index * (self.N + 1), is_fixed_point(self.params, anchor))
            if not orbit.degenerate:
                self._build_orbit(orbit)
            self.orbits[name] = orbit

    # -- construction -----------------------------------------------------

    def _build_orbit(self, orbit: _Orbit):
        params, N, K = self.params, self.N, self.tail_terms
        q, omega0 = params.q, params.omega0
        stored = np.array(self.lattice.orbit(orbit.name).points, dtype=float)
        s_stored = stored - omega0
        s_tail = s_stored[0] * q ** np.arange(K + 1, dtype=float)
        s_all = np.concatenate([s_stored, s_tail[N + 1:]])
        t_all = np.concatenate([stored, omega0 + s_tail[N + 1:]])

        orbit.t = t_all[:K]
        d = (q - 1.0) * s_all[:K]
        d[:N] = (q - 1.0) * stored[:N] + params.omega
        orbit.d = d
        weight = stored[0] * (1.0 - q) - params.omega
        sign = 1.0 if orbit.name == 'b' else -1.0
        orbit.coef = sign * weight * q ** np.arange(K, dtype=float)

        quad = tail_cols = None
        if N >= 2:
            nodes = tail_nodes(q, N)
            quad = TailQuadratic(s_stored[nodes])
            tail_cols = orbit.offset + nodes
        orbit.quad = quad
        orbit.tail_cols = tail_cols

        # U0: row k reads V[k+1]
        rows, cols, vals = [], [], []
        k_stored = np.arange(min(K, N))
        rows.append(k_stored)
        cols.append(orbit.offset + k_stored + 1)
        vals.append(np.ones(k_stored.size))
        if K > N:
            k_tail = np.arange(N, K)
            w = quad.weights(s_all[k_tail + 1])
            rows.append(np.repeat(k_tail, 3))
            cols.append(np.tile(tail_cols, k_tail.size))
            vals.append(w.ravel())
        orbit.U0 = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(K, self.size))

        # U1: row k is the Hahn quotient at t_k
        rows, cols, vals = [], [], []
        inv = 1.0 / d[k_stored]
        rows += [k_stored, k_stored]
        cols += [orbit.offset + k_stored + 1, orbit.offset + k_stored]
        vals += [inv, -inv]
        if K > N:
            k_tail = np.arange(N, K)
            w = quad.slopes_between(s_all[k_tail], s_all[k_tail + 1])
            rows.append(np.repeat(k_tail, 3))
            cols.append(np.tile(tail_cols, k_tail.size))
            vals.append(w.ravel())
        orbit.U1 = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(K, self.size))

        for pname, func in self.problem.point_parameters.items():
            orbit.point_values[pname] = np.asarray(func(orbit.t), dtype=float)

    # -- helpers ---------------------------------------------------------

    def live_orbits(self):
        return [o for o in self.orbits.values() if not o.degenerate]

    def vector(self, gf: GridFunction) -> np.ndarray:
        if not gf.lattice.matches(self.lattice):
            raise LatticeMismatchError("grid function lives on a different lattice")
        return np.concatenate([gf.values_a, gf.values_b])

    def tail_limits(self, z: np.ndarray) -> dict:
        """(value, slope) of each live orbit continuation at omega0."""
        out = {}
        for orbit in self.live_orbits():
            if orbit.quad is None:
                out[orbit.name] = (float(z[orbit.offset + self.N]), 0.0)
                continue
            tail = z[orbit.tail_cols]
            out[orbit.name] = (float(orbit.quad.gamma @ tail), float(orbit.quad.beta @ tail))
        return out

    def omega0_value(self, z: np.ndarray) -> float:
        limits = self.tail_limits(z)
        return float(np.mean([v for v, _ in limits.values()]))

    def omega0_slope(self, z: np.ndarray) -> float:
        limits = self.tail_limits(z)
        return float(np.mean([s for _, s in limits.values()]))

    def grid(self, z: np.ndarray) -> GridFunction:
        N = self.N
        return GridFunction(self.lattice, z[:N + 1].copy(), z[N + 1:].copy(), self.omega0_value(z))

    def env(self, orbit: _Orbit, z: np.ndarray) -> dict:
        env = dict(self.problem.parameters)
        env.update(orbit.point_values)
        env['t'] = orbit.t
        env['y'] = orbit.U0 @ z
        env['Dy'] = orbit.U1 @ z
        env['ya'] = z[self.orbits['a'].offset]
        env['yb'] = z[self.orbits['b'].offset]
        return env

    def _eval(self, node: ex.Expression, env: dict, size: int) -> np.ndarray:
        value = ex.evaluate(node, env)
        return np.broadcast_to(np.asarray(value, dtype=float), (size,))

    # -- functional, gradient, hessian -----------------------------------

    def value(self, z: np.ndarray, integrand: ex.Expression) -> float:
        total = 0.0
        for orbit in self.live_orbits():
            vals = self._eval(integrand, self.env(orbit, z), orbit.terms)
            total += math.fsum(orbit.coef * vals)
        return total

    def integral_of(self, z: np.ndarray, node: ex.Expression) -> float:
        return self.value(z, node)

    def tail_estimate(self, z: np.ndarray, integrand: ex.Expression) -> float:
        q = self.params.q
        total = 0.0
        for orbit in self.live_orbits():
            vals = self._eval(integrand, self.env(orbit, z), orbit.terms)
            total += abs(orbit.coef[-1] * vals[-1]) * q / (1.0 - q)
        return total

    def gradient(self, z: np.ndarray, derivs: 'Derivatives') -> np.ndarray:
        grad = np.zeros(self.size)
        for orbit in self.live_orbits():
            env = self.env(orbit, z)
            c = orbit.coef
            part = {v: self._eval(derivs.first[v], env, orbit.terms) for v in PARTIAL_VARS}
            grad += orbit.U0.T @ (c * part['y']) + orbit.U1.T @ (c * part['Dy'])
            grad[self.orbits['a'].offset] += math.fsum(c * part['ya'])
            grad[self.orbits['b'].offset] += math.fsum(c * part['yb'])
        return grad

    def tail_gradient(self, name: str, z: np.ndarray, derivs: 'Derivatives') -> np.ndarray:
        """Gradient of the continued terms k >= N of one orbit, on its three tail nodes."""
        orbit = self.orbits[name]
        if orbit.degenerate or orbit.terms <= self.N:
            return np.zeros(3)
        env = self.env(orbit, z)
        N = self.N
        c = orbit.coef[N:]
        py = self._eval(derivs.first['y'], env, orbit.terms)[N:]
        pdy = self._eval(derivs.first['Dy'], env, orbit.terms)[N:]
        grad = orbit.U0[N:].T @ (c * py) + orbit.U1[N:].T @ (c * pdy)
        return np.asarray(grad)[orbit.tail_cols]

    def _selector(self, orbit: _Orbit, column: int) -> sp.csr_matrix:
        K = orbit.terms
        return sp.csr_matrix((np.ones(K), (np.arange(K), np.full(K, column))), shape=(K, self.size))

    def hessian(self, z: np.ndarray, derivs: 'Derivatives') -> sp.csr_matrix:
        hess = sp.csr_matrix((self.size, self.size))
        for orbit in self.live_orbits():
            env = self.env(orbit, z)
            maps = {
                'y': orbit.U0,
                'Dy': orbit.U1,
                'ya': self._selector(orbit, self.orbits['a'].offset),
                'yb': self._selector(orbit, self.orbits['b'].offset),
            }
            for (v, w), node in derivs.second.items():
                if node == ex.ZERO:
                    continue
                weights = orbit.coef * self._eval(node, env, orbit.terms)
                block = maps[v].T @ sp.diags(weights) @ maps[w]
                hess = hess + (block if v == w else block + block.T)
        return hess.tocsr()

    # -- constraints ------------------------------------------------------

    def continuity_matrix(self) -> sp.csr_matrix:
        """Rows (value, slope) of the a-continuation minus the b-continuation at omega0."""
        live = self.live_orbits()
        if len(live) != 2:
            return sp.csr_matrix((0, self.size))
        oa, ob = live
        rows, cols, vals = [], [], []
        for r, attr in enumerate(('gamma', 'beta')):
            rows += [np.full(3, r), np.full(3, r)]
            cols += [oa.tail_cols, ob.tail_cols]
            vals += [getattr(oa.quad, attr), -getattr(ob.quad, attr)]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(2, self.size))

    def constraints(self, boundary: BoundarySpec,
                    continuity: bool = True) -> tuple[sp.csr_matrix, np.ndarray]:
        """Linear equalities A z = rhs: pinned ends, omega0 continuity, degenerate ties."""
        N = self.N
        if N < 2:
            raise ParameterError("solving needs a lattice of depth >= 2")
        blocks: list[sp.spmatrix] = []
        rhs: list[float] = []

        for name, cond in (('a', boundary.at_a), ('b', boundary.at_b)):
            if not cond.is_free:
                col = self.orbits[name].offset
                blocks.append(sp.csr_matrix(([1.0], ([0], [col])), shape=(1, self.size)))
                rhs.append(cond.value)

        live = self.live_orbits()
        if len(live) == 2:
            if continuity:
                blocks.append(self.continuity_matrix())
                rhs.extend([0.0, 0.0])
        else:
            (source,) = live
            tied = self.orbits['b' if source.name == 'a' else 'a']
            k = np.arange(N + 1)
            rows = np.concatenate([k, np.repeat(k, 3)])
            cols = np.concatenate([tied.offset + k, np.tile(source.tail_cols, N + 1)])
            vals = np.concatenate([np.ones(N + 1), np.tile(-source.quad.gamma, N + 1)])
            blocks.append(sp.coo_matrix((vals, (rows, cols)), shape=(N + 1, self.size)))
            rhs.extend([0.0] * (N + 1))
        if not blocks:
            return sp.csr_matrix((0, self.size)), np.zeros(0)
        A = sp.vstack(blocks).tocsr()
        # rows scaled to unit max-norm; the solution set is unchanged
        scale = 1.0 / abs(A).max(axis=1).toarray().ravel()
        return (sp.diags(scale) @ A).tocsr(), np.array(rhs, dtype=float) * scale


class Derivatives:
    """First and second partials of an integrand in (y, Dy, ya, yb)."""

    def __init__(self, node: ex.Expression, second: bool = True):
        self.node = node
        self.first = {v: ex.derivative(node, v) for v in PARTIAL_VARS}
        self.second = {}
        if second:
            for i, v in enumerate(PARTIAL_VARS):
                for w in PARTIAL_VARS[i:]:
                    self.second[(v, w)] = ex.derivative(self.first[v], w)


# ---------------------------------------------------------------------------
# Functional and residuals on a given grid function
# ---------------------------------------------------------------------------

def _discretize(problem: VariationalProblem, gf: GridFunction,
                spec: QuadratureSpec) -> tuple[Discretization, np.ndarray]:
    disc = Discretization(problem, gf.lattice, spec)
    return disc, disc.vector(gf)


def functional_value(problem: VariationalProblem, gf: GridFunction,
                     spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    disc, z = _discretize(problem, gf, spec)
    return disc.value(z, problem.lagrangian)


def tail_estimate(problem: VariationalProblem, gf: GridFunction,
                  spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Geometric bound on the part of the functional's series left unsummed."""
    disc, z = _discretize(problem, gf, spec)
    return disc.tail_estimate(z, problem.lagrangian)


class IntegrandTerms(NamedTuple):
    t: np.ndarray
    value: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray
    d5: np.ndarray


def integrand_terms(problem: VariationalProblem, gf: GridFunction,
                    spec: QuadratureSpec = DEFAULT_SPEC) -> dict[str, IntegrandTerms]:
    """L and its partials in (y(sigma t), D[y], y(a), y(b)) at stored orbit indices k = 0..N-1."""
    disc, z = _discretize(problem, gf, spec)
    N = disc.N
    derivs = Derivatives(problem.lagrangian, second=False)
    out = {}
    for name, orbit in disc.orbits.items():
        if orbit.degenerate:
            empty = np.zeros(0)
            out[name] = IntegrandTerms(*(empty,) * 6)
            continue
        env = disc.env(orbit, z)
        columns = [disc._eval(node, env, orbit.terms)[:N].copy()
                   for node in [problem.lagrangian] + [derivs.first[v] for v in PARTIAL_VARS]]
        out[name] = IntegrandTerms(orbit.t[:N].copy(), *columns)
    return out


def constraint_value(problem: VariationalProblem, gf: GridFunction,
                     spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    if problem.constraint is None:
        raise UsageError("problem has no integral constraint")
    disc, z = _discretize(problem, gf, spec)
    return disc.value(z, problem.constraint.expr)


def first_variation(problem: VariationalProblem, gf: GridFunction, h: GridFunction,
                    spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """int (d2L h(sigma t) + d3L D[h] + d4L h(a) + d5L h(b)) d_{q,omega}t."""
    disc, z = _discretize(problem, gf, spec)
    zh = disc.vector(h)
    grad = disc.gradient(z, Derivatives(problem.lagrangian, second=False))
    return float(grad @ zh)


def check_gradient(problem: VariationalProblem, gf: GridFunction, step: float = 1e-6,
                   spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Largest |analytic - central difference| / (1 + |analytic|) over all unknowns."""
    disc, z = _discretize(problem, gf, spec)
    grad = disc.gradient(z, Derivatives(problem.lagrangian, second=False))
    worst = 0.0
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        fd = (disc.value(zp, problem.lagrangian) - disc.value(zm, problem.lagrangian)) / (2 * step)
        worst = max(worst, abs(grad[i] - fd) / (1.0 + abs(grad[i])))
    return worst


def el_residual(problem: VariationalProblem, gf: GridFunction,
                spec: QuadratureSpec = DEFAULT_SPEC) -> OrbitResiduals:
    """d2L{y}(t_k) - D[d3L]{y}(t_k) at stored orbit indices k = 0..N-2."""
    disc, z = _discretize(problem, gf, spec)
    N = disc.N
    p2 = ex.derivative(problem.lagrangian, 'y')
    p3 = ex.derivative(problem.lagrangian, 'Dy')
    out = {}
    for name, orbit in disc.orbits.items():
        if orbit.degenerate:
            out[name] = np.zeros(0)
            continue
        env = disc.env(orbit, z)
        d2 = disc._eval(p2, env, orbit.terms)[:N - 1]
        d3 = disc._eval(p3, env, orbit.terms)[:N]
        out[name] = d2 - np.diff(d3) / orbit.d[:N - 1]
    return OrbitResiduals(out['a'], out['b'])


def _d3_at_anchor(disc: Discretization, z: np.ndarray, name: str, p3: ex.Expression) -> float:
    orbit = disc.orbits[name]
    if not orbit.degenerate:
        return float(disc._eval(p3, disc.env(orbit, z), orbit.terms)[0])
    # anchor on omega0: y(sigma t) = y(omega0), D[y] is the tail slope
    env = dict(disc.problem.parameters)
    point = np.array([disc.params.omega0])
    for pname, func in disc.problem.point_parameters.items():
        env[pname] = np.asarray(func(point), dtype=float)
    env.update(t=point, y=z[orbit.offset], Dy=disc.omega0_slope(z),
               ya=z[disc.orbits['a'].offset], yb=z[disc.orbits['b'].offset])
    return float(disc._eval(p3, env, 1)[0])


def _nbc(problem: VariationalProblem, gf: GridFunction, end: str,
         spec: QuadratureSpec) -> float:
    cond = problem.boundary.at_a if end == 'a' else problem.boundary.at_b
    if not cond.is_free:
        raise UsageError(f"natural boundary condition asked for at fixed end {end}")
    disc, z = _discretize(problem, gf, spec)
    p3 = ex.derivative(problem.lagrangian, 'Dy')
    lhs = _d3_at_anchor(disc, z, end, p3)
    if end == 'a':
        return lhs - disc.integral_of(z, ex.derivative(problem.lagrangian, 'ya'))
    return lhs + disc.integral_of(z, ex.derivative(problem.lagrangian, 'yb'))


def nbc_residual_a(problem: VariationalProblem, gf: GridFunction,
                   spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """d3L(a) - int d4L, the transversality residual when y(a) is free."""
    return _nbc(problem, gf, 'a', spec)


def nbc_residual_b(problem: VariationalProblem, gf: GridFunction,
                   spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """d3L(b) + int d5L, the transversality residual when y(b) is free."""
    return _nbc(problem, gf, 'b', spec)


# ---------------------------------------------------------------------------
# Damped Newton
# ---------------------------------------------------------------------------

class NewtonSystem:
    """A square or tall nonlinear system F(x) = 0 with sparse Jacobian."""

    def residual(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> sp.spmatrix:
        raise NotImplementedError


class NewtonResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    fallback_steps: int
    singular: bool


def _newton_direction(jac: sp.spmatrix, res: np.ndarray) -> Optional[np.ndarray]:
    rows, cols = jac.shape
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        try:
            if rows == cols:
                step = spla.spsolve(sp.csc_matrix(jac), -res)
            else:
                step = spla.lsqr(jac, -res, atol=1e-15, btol=1e-15, iter_lim=10 * cols)[0]
        except (RuntimeError, ValueError):
            return None
    step = np.atleast_1d(np.asarray(step, dtype=float))
    if not np.all(np.isfinite(step)):
        return None
    if rows == cols and np.linalg.norm(jac @ step + res) > 1e-6 * (1.0 + np.linalg.norm(res)):
        return None
    return step


def _line_search(system: NewtonSystem, x: np.ndarray, direction: np.ndarray,
                 merit: float) -> Optional[np.ndarray]:
    alpha = 1.0
    while alpha > 1e-10:
        candidate = x + alpha * direction
        try:
            trial = np.linalg.norm(system.residual(candidate)) ** 2
        except ArithmeticError:
            trial = math.inf
        if trial <= (1.0 - 1e-4 * alpha) * merit:
            return candidate
        alpha *= 0.5
    return None


def rounding_floor(jac: sp.spmatrix, x: np.ndarray) -> float:
    """Residual norm that rounding alone leaves in F for a system of this scale."""
    scale = max(1.0, float(np.max(np.abs(x)))) if x.size else 1.0
    return ROUNDING_FACTOR * np.finfo(float).eps * float(spla.norm(jac, np.inf)) * scale


def damped_newton(system: NewtonSystem, x0: np.ndarray, tol: float,
                  max_iter: int) -> NewtonResult:
    """Newton on F(x) = 0 with backtracking on ||F||^2 and a steepest-descent fallback.

    Converged means ||F|| < tol, or, once no step reduces ||F|| any more or the
    iterations run out, ||F|| within the rounding floor of the Jacobian. Large
    penalty weights put that floor above tol.
    """
    x = np.array(x0, dtype=float)
    fallback_steps = 0
    singular = False
    res = system.residual(x)
    norm = float(np.linalg.norm(res))
    for iteration in range(max_iter):
        if norm < tol:
            return NewtonResult(x, True, iteration, norm, fallback_steps, singular)
        jac = system.jacobian(x)
        merit = norm ** 2
        direction = _newton_direction(jac, res)
        accepted = None
        if direction is None:
            singular = True
        else:
            accepted = _line_search(system, x, direction, merit)
        if accepted is None:
            fallback_steps += 1
            logger.debug("Newton step rejected at iteration %d; trying gradient step", iteration)
            accepted = _line_search(system, x, -(jac.T @ res), merit)
            if accepted is None:
                converged = norm <= rounding_floor(jac, x)
                logger.debug("damped Newton stalled at residual %.3e (%s)", norm,
                             'rounding floor' if converged else 'not converged')
                return NewtonResult(x, converged, iteration, norm, fallback_steps, singular)
        x = accepted
        res = system.residual(x)
        norm = float(np.linalg.norm(res))
    converged = norm < tol or norm <= rounding_floor(system.jacobian(x), x)
    return NewtonResult(x, converged, max_iter, norm, fallback_steps, singular)


class _OmegaTie:
    """Quadratic penalty (w/2)|C z|^2 on the omega0 mismatch; inactive when weight is None."""

    def __init__(self, disc: Discretization, weight: Optional[float]):
        self.weight = weight
        self.C = disc.continuity_matrix() if weight is not None else None

    def gradient(self, z: np.ndarray) -> np.ndarray:
        if self.C is None or self.C.shape[0] == 0:
            return np.zeros(z.size)
        return self.weight * (self.C.T @ (self.C @ z))

    def hessian(self, n: int) -> sp.csr_matrix:
        if self.C is None or self.C.shape[0] == 0:
            return sp.csr_matrix((n, n))
        return (self.weight * (self.C.T @ self.C)).tocsr()


class _StationaritySystem(NewtonSystem):
    """Unknowns (z, mu): grad J(z) - A^T mu = 0, A z = rhs."""

    def __init__(self, disc: Discretization, integrand: ex.Expression, A, rhs, tie: _OmegaTie):
        self.disc, self.A, self.rhs, self.tie = disc, A, rhs, tie
        self.derivs = Derivatives(integrand)
        self.n, self.m = disc.size, A.shape[0]

    def residual(self, x):
        z, mu = x[:self.n], x[self.n:]
        grad = self.disc.gradient(z, self.derivs) + self.tie.gradient(z)
        return np.concatenate([grad - self.A.T @ mu, self.A @ z - self.rhs])

    def jacobian(self, x):
        z = x[:self.n]
        H = self.disc.hessian(z, self.derivs) + self.tie.hessian(self.n)
        if self.m == 0:
            return H.tocsr()
        return sp.bmat([[H, -self.A.T], [self.A, None]], format='csr')


class _NormalSystem(NewtonSystem):
    """Unknowns (z, mu, lam): grad L - lam grad J_F - A^T mu = 0, A z = rhs, J_F = gamma."""

    def __init__(self, disc, integrand, constraint_expr, gamma, A, rhs, tie: _OmegaTie):
        self.disc, self.A, self.rhs, self.gamma, self.tie = disc, A, rhs, gamma, tie
        self.L = Derivatives(integrand)
        self.F = Derivatives(constraint_expr)
        self.constraint_expr = constraint_expr
        self.n, self.m = disc.size, A.shape[0]

    def residual(self, x):
        z, mu, lam = x[:self.n], x[self.n:self.n + self.m], x[-1]
        gF = self.disc.gradient(z, self.F)
        grad = self.disc.gradient(z, self.L) + self.tie.gradient(z)
        return np.concatenate([
            grad - lam * gF - self.A.T @ mu,
            self.A @ z - self.rhs,
            [self.disc.value(z, self.constraint_expr) - self.gamma],
        ])

    def jacobian(self, x):
        z, lam = x[:self.n], x[-1]
        H = (self.disc.hessian(z, self.L) - lam * self.disc.hessian(z, self.F)
             + self.tie.hessian(self.n))
        gF = sp.csr_matrix(self.disc.gradient(z, self.F)[:, None])
        if self.m == 0:
            return sp.bmat([[H, -gF], [gF.T, None]], format='csr')
        return sp.bmat([[H, -self.A.T, -gF], [self.A, None, None], [gF.T, None, None]],
                       format='csr')


class _AbnormalSystem(NewtonSystem):
    """Unknowns (z, mu): -grad J_F - A^T mu = 0, A z = rhs, J_F = gamma (overdetermined)."""

    def __init__(self, disc, constraint_expr, gamma, A, rhs):
        self.disc, self.A, self.rhs, self.gamma = disc, A, rhs, gamma
        self.F = Derivatives(constraint_expr)
        self.constraint_expr = constraint_expr
        self.n = disc.size

    def residual(self, x):
        z, mu = x[:self.n], x[self.n:]
        return np.concatenate([
            -self.disc.gradient(z, self.F) - self.A.T @ mu,
            self.A @ z - self.rhs,
            [self.disc.value(z, self.constraint_expr) - self.gamma],
        ])

    def jacobian(self, x):
        z = x[:self.n]
        H = -self.disc.hessian(z, self.F)
        gF = sp.csr_matrix(self.disc.gradient(z, self.F)[None, :])
        return sp.bmat([[H, -self.A.T], [self.A, None], [gF, None]], format='csr')


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def initial_guess(problem: VariationalProblem, lattice: Lattice) -> np.ndarray:
    """Straight line through the pinned end data, a constant for one pinned end, else zero."""
    va, vb = problem.boundary.at_a.value, problem.boundary.at_b.value
    if va is not None and vb is not None:
        slope = (vb - va) / (problem.b - problem.a)

        def line(t):
            return va + slope * (t - problem.a)
    else:
        level = va if va is not None else (vb if vb is not None else 0.0)

        def line(t):
            return level + 0.0 * t
    pa = np.array(lattice.orbit_a.points)
    pb = np.array(lattice.orbit_b.points)
    return np.concatenate([line(pa), line(pb)])


def _objective(problem: VariationalProblem) -> ex.Expression:
    if problem.sense == 'max':
        return ex.fold(ex.Neg(problem.lagrangian))
    return problem.lagrangian


def _finish_report(problem: VariationalProblem, disc: Discretization, z: np.ndarray,
                   result: NewtonResult, spec: QuadratureSpec, residual_problem=None,
                   **extra) -> SolveReport:
    gf = disc.grid(z)
    target = residual_problem or problem
    free_a = problem.boundary.at_a.is_free
    free_b = problem.boundary.at_b.is_free
    return SolveReport(
        minimizer=gf,
        functional_value=disc.value(z, problem.lagrangian),
        el_residuals=el_residual(target, gf, spec),
        nbc_a=nbc_residual_a(target, gf, spec) if free_a else None,
        nbc_b=nbc_residual_b(target, gf, spec) if free_b else None,
        iterations=result.iterations,
        converged=result.converged,
        gradient_norm=result.residual_norm,
        fallback_steps=result.fallback_steps,
        tail_estimate=disc.tail_estimate(z, problem.lagrangian),
        sense=problem.sense,
        **extra,
    )


def _prepare(problem: VariationalProblem, init: Optional[GridFunction],
             opts: SolveOptions) -> tuple[Discretization, np.ndarray]:
    if init is not None:
        lattice = init.lattice
        if not (lattice.params == problem.params and lattice.a == problem.a
                and lattice.b == problem.b):
            raise LatticeMismatchError("initial grid does not belong to this problem")
    else:
        lattice = working_lattice(problem.params, problem.a, problem.b, opts.depth,
                                  opts.min_step_scale)
    disc = Discretization(problem, lattice, opts.quadrature)
    z0 = disc.vector(init) if init is not None else initial_guess(problem, lattice)
    return disc, z0


def _hard_tie(opts: SolveOptions) -> bool:
    return opts.omega0_tie_weight is None


def solve_direct(problem: VariationalProblem, init: Optional[GridFunction] = None,
                 opts: Optional[SolveOptions] = None) -> SolveReport:
    """Stationary point of the discretised functional with the boundary data imposed."""
    opts = opts or SolveOptions()
    disc, z0 = _prepare(problem, init, opts)
    A, rhs = disc.constraints(problem.boundary, continuity=_hard_tie(opts))
    tie = _OmegaTie(disc, opts.omega0_tie_weight)
    system = _StationaritySystem(disc, _objective(problem), A, rhs, tie)
    x0 = np.concatenate([z0, np.zeros(A.shape[0])])
    result = damped_newton(system, x0, opts.tol, opts.max_iter)
    if not result.converged:
        logger.warning("solve_direct did not converge for %s (residual %.3e)",
                       problem.name, result.residual_norm)
    message = 'converged' if result.converged else 'did not converge'
    if result.singular:
        message += '; singular Newton system, gradient steps used'
    return _finish_report(problem, disc, result.x[:disc.size], result, opts.quadrature,
                          message=message)


def _normal_extremal(disc: Discretization, z: np.ndarray, constraint_expr) -> bool:
    """False when grad J_F lies in the span of the boundary constraints."""
    A, _ = disc.constraints(disc.problem.boundary)
    gF = disc.gradient(z, Derivatives(constraint_expr, second=False))
    if A.shape[0] == 0:
        return float(np.linalg.norm(gF)) > ABNORMAL_TOL
    coeffs = spla.lsqr(A.T, gF, atol=1e-15, btol=1e-15)[0]
    return float(np.linalg.norm(gF - A.T @ coeffs)) > ABNORMAL_TOL


def _abnormal_attempt(disc: Discretization, constraint_expr, gamma: float, start: np.ndarray,
                      opts: SolveOptions) -> NewtonResult:
    A, rhs = disc.constraints(disc.problem.boundary)
    abnormal = _AbnormalSystem(disc, constraint_expr, gamma, A, rhs)
    return damped_newton(abnormal, np.concatenate([start, np.zeros(A.shape[0])]),
                         opts.tol, opts.max_iter)


def _close(z: np.ndarray, other: np.ndarray, rtol: float = 1e-2) -> bool:
    return float(np.max(np.abs(z - other))) <= rtol * (1.0 + float(np.max(np.abs(other))))


def solve_isoperimetric(problem: VariationalProblem, init: Optional[GridFunction] = None,
                        opts: Optional[SolveOptions] = None) -> SolveReport:
    """Extremal of L subject to int F = gamma: normal multiplier first, then abnormal."""
    if problem.constraint is None:
        raise UsageError("solve_isoperimetric needs a problem with a constraint")
    opts = opts or SolveOptions()
    disc, z0 = _prepare(problem, init, opts)
    A, rhs = disc.constraints(problem.boundary, continuity=_hard_tie(opts))
    tie = _OmegaTie(disc, opts.omega0_tie_weight)
    m = A.shape[0]
    F, gamma = problem.constraint.expr, problem.constraint.gamma
    rng = np.random.default_rng(opts.seed)
    # max problems run on -L, so the solved multiplier changes sign
    flip = -1.0 if problem.sense == 'max' else 1.0

    normal = _NormalSystem(disc, _objective(problem), F, gamma, A, rhs, tie)
    starts = [z0] + [z0 + rng.normal(scale=0.1 * (1.0 + np.abs(z0)))
                     for _ in range(opts.restarts)]
    failures = []
    abnormal_result = None
    for attempt, start in enumerate(starts):
        result = damped_newton(normal, np.concatenate([start, np.zeros(m + 1)]),
                               opts.tol, opts.max_iter)
        if not result.converged:
            logger.debug("normal attempt %d stopped at residual %.3e",
                         attempt, result.residual_norm)
            failures.append(f"normal attempt {attempt}: residual {result.residual_norm:.3e}")
            continue
        z = result.x[:disc.size]
        if not _normal_extremal(disc, z, F):
            failures.append(f"normal attempt {attempt}: point is an extremal of the constraint")
            break
        # a huge multiplier can pass the tolerance while z creeps onto an abnormal point
        nearby = _abnormal_attempt(disc, F, gamma, z, opts)
        if nearby.converged and _close(nearby.x[:disc.size], z):
            failures.append(f"normal attempt {attempt}: multiplier {float(result.x[-1]):.3e} "
                            "runs off next to an extremal of the constraint")
            abnormal_result = nearby
            break
        lam = flip * float(result.x[-1])
        H = ex.fold(ex.Sub(problem.lagrangian, ex.Mul(ex.Number(lam), F)))
        return _finish_report(problem, disc, z, result, opts.quadrature,
                              residual_problem=problem.with_lagrangian(H),
                              multiplier=lam, lambda0=1,
                              constraint_value=disc.value(z, F),
                              message='normal extremal')

    logger.warning("normal isoperimetric solve failed (%s); trying the abnormal case",
                   '; '.join(failures))
    result = abnormal_result or _abnormal_attempt(disc, F, gamma, z0, opts)
    z = result.x[:disc.size]
    H = ex.fold(ex.Neg(F))
    message = 'abnormal extremal' if result.converged else (
        'normal and abnormal attempts failed: ' + '; '.join(failures))
    return _finish_report(problem, disc, z, result, opts.quadrature,
                          residual_problem=problem.with_lagrangian(H),
                          multiplier=1.0, lambda0=0,
                          constraint_value=disc.value(z, F), message=message)


def solve(problem: VariationalProblem, init: Optional[GridFunction] = None,
          opts: Optional[SolveOptions] = None) -> SolveReport:
    if problem.constraint is not None:
        return solve_isoperimetric(problem, init, opts)
    return solve_direct(problem, init, opts)


# ---------------------------------------------------------------------------
# Convexity probe
# ---------------------------------------------------------------------------

Box = Union[tuple[float, float], Mapping[str, tuple[float, float]]]


def convexity_probe(problem: VariationalProblem, samples: int = 2000,
                    box: Box = (-10.0, 10.0), seed: int = 0,
                    lagrangian: Optional[ex.Expression] = None) -> ConvexityVerdict:
    """Test L(t, u + du) - L(t, u) >= sum_i d_iL(t, u) du_i on random pairs in a box."""
    if samples < 1:
        raise ParameterError(f"samples must be >= 1, got {samples}")
    node = lagrangian if lagrangian is not None else problem.lagrangian
    bounds = {v: (box[v] if isinstance(box, Mapping) else box) for v in PARTIAL_VARS}
    for v, (lo, hi) in bounds.items():
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ParameterError(f"box bounds for {v} must be finite with lo <= hi")

    rng = np.random.default_rng(seed)
    params = problem.params
    t_lo = min(problem.a, params.omega0)
    t_hi = max(problem.b, params.omega0)
    t = rng.uniform(t_lo, t_hi, samples)
    u = {v: rng.uniform(*bounds[v], samples) for v in PARTIAL_VARS}
    w = {v: rng.uniform(*bounds[v], samples) for v in PARTIAL_VARS}

    env = dict(problem.parameters)
    for pname, func in problem.point_parameters.items():
        env[pname] = np.asarray(func(t), dtype=float)
    env['t'] = t
    env_u = dict(env, **u)
    env_w = dict(env, **w)

    def values(n: ex.Expression, e: dict) -> np.ndarray:
        return np.broadcast_to(np.asarray(ex.evaluate(n, e), dtype=float), (samples,))

    lu = values(node, env_u)
    lw = values(node, env_w)
    linear = sum(values(ex.derivative(node, v), env_u) * (w[v] - u[v]) for v in PARTIAL_VARS)
    gap = lw - lu - linear
    tol = 1e-9 * (1.0 + np.abs(lu) + np.abs(lw))

    def witness(index: int) -> dict:
        return {
            't': float(t[index]),
            'u': {v: float(u[v][index]) for v in PARTIAL_VARS},
            'u_plus_du': {v: float(w[v][index]) for v in PARTIAL_VARS},
            'gap': float(gap[index]),
        }

    convex_bad = gap < -tol
    concave_bad = gap > tol
    if not convex_bad.any():
        return ConvexityVerdict('convex-evidence', samples)
    if not concave_bad.any():
        return ConvexityVerdict('concave-evidence', samples)
    return ConvexityVerdict('neither', samples, {
        'convexity_violation': witness(int(np.argmin(gap))),
        'concavity_violation': witness(int(np.argmax(gap))),
    })
