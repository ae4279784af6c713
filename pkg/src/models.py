"""
Built-in problems and their oracles.

example1 and example2 are the quadratic free-end problems on [0, 1] with known
closed-form minimizers; example2-limit is the fixed-end problem the penalty
terms of example2 converge to. The adjustment model is a discounted tracking
problem whose weight is the q,omega-exponential, solved either through the
general engine or by shooting on its reduced recurrence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from src import expr as ex
from src.errors import NonConvergenceError, ParameterError, ValidityWindowError
from src.hahn_core import (
    GridFunction,
    HahnParams,
    is_fixed_point,
    qw_exponential_values,
    sigma,
)
from src.varcalc import (
    DEFAULT_MIN_STEP_SCALE,
    BoundarySpec,
    Derivatives,
    Discretization,
    EndCondition,
    OrbitResiduals,
    SolveOptions,
    VariationalProblem,
    solve_direct,
    tail_nodes,
    working_lattice,
)

logger = logging.getLogger(__name__)

ClosedForm = Callable[[float], float]

EXAMPLE1_LAGRANGIAN = "y + (1/2)*Dy^2"
EXAMPLE2_LAGRANGIAN = "y + (1/2)*Dy^2 + gamma*(yb - 1)^2/2 + nu*ya^2/2"
ADJUSTMENT_LAGRANGIAN = "E*(alpha*(y - ybar)^2 + Dy^2)"


def example1_problem(params: HahnParams) -> tuple[VariationalProblem, ClosedForm]:
    """y(0) free, y(1) = 1."""
    q, omega = params.q, params.omega
    problem = VariationalProblem(
        params=params, a=0.0, b=1.0,
        lagrangian=ex.parse(EXAMPLE1_LAGRANGIAN),
        boundary=BoundarySpec(EndCondition.free(), EndCondition.fixed(1.0)),
        name='example1',
    )

    def closed_form(t: float) -> float:
        return (t * t - omega * t + q + omega) / (q + 1.0)

    return problem, closed_form


def example2_problem(params: HahnParams, gamma: float = 2.0,
                     nu: float = 2.0) -> tuple[VariationalProblem, ClosedForm]:
    """Both ends free; y(0) = 0 and y(1) = 1 are encouraged by quadratic penalties."""
    if not (gamma > 0.0 and nu > 0.0):
        raise ParameterError(f"gamma and nu must be positive, got {gamma!r}, {nu!r}")
    q, omega = params.q, params.omega
    problem = VariationalProblem(
        params=params, a=0.0, b=1.0,
        lagrangian=ex.parse(EXAMPLE2_LAGRANGIAN, parameters=('gamma', 'nu')),
        parameters={'gamma': float(gamma), 'nu': float(nu)},
        name='example2',
    )
    denom = (q + 1.0) * (gamma + nu * gamma + nu)
    slope = -(omega * (nu + gamma) - nu * (gamma - 1.0) * (q + 1.0) + gamma * nu) / denom
    offset = ((gamma - 1.0) * (q + 1.0) - gamma * (1.0 - omega)) / denom

    def closed_form(t: float) -> float:
        return t * t / (q + 1.0) + slope * t + offset

    return problem, closed_form


def example2_limit_problem(params: HahnParams) -> tuple[VariationalProblem, ClosedForm]:
    """The fixed-end problem y(0) = 0, y(1) = 1 that example2 approaches as gamma, nu grow."""
    q = params.q
    problem = VariationalProblem(
        params=params, a=0.0, b=1.0,
        lagrangian=ex.parse(EXAMPLE1_LAGRANGIAN),
        boundary=BoundarySpec(EndCondition.fixed(0.0), EndCondition.fixed(1.0)),
        name='example2-limit',
    )

    def closed_form(t: float) -> float:
        return (t * t + q * t) / (q + 1.0)

    return problem, closed_form


# ---------------------------------------------------------------------------
# Adjustment model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdjustmentSpec:
    """Discounted tracking of a target path over [0, T].

    r is the discount rate (> 1), alpha weighs the distance to the target
    and T is the horizon. omega0 has to lie in [0, T].
    """

    params: HahnParams
    r: float = 1.05
    alpha: float = 1.0
    T: float = 1.0
    target: ex.Expression = field(default_factory=lambda: ex.parse("t"))

    def __post_init__(self):
        if not self.r > 1.0:
            raise ParameterError(f"r must be > 1, got {self.r!r}")
        if not self.alpha > 0.0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha!r}")
        if not self.T > 0.0:
            raise ParameterError(f"T must be > 0, got {self.T!r}")
        omega0 = self.params.omega0
        if not (0.0 <= omega0 <= self.T or is_fixed_point(self.params, self.T)):
            raise ParameterError(f"omega0={omega0!r} must lie in [0, T=({self.T!r})]")
        extra = ex.names(self.target) - {'t'}
        if extra:
            raise ParameterError(f"target may only use t, found {sorted(extra)}")

    @property
    def rate(self) -> float:
        return self.r - 1.0

    def discount(self, t: np.ndarray) -> np.ndarray:
        return qw_exponential_values(self.params, self.rate, t)

    def target_values(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(
            np.asarray(ex.evaluate(self.target, {'t': t}), dtype=float), t.shape).copy()

    def target_after_step(self, t: np.ndarray) -> np.ndarray:
        return self.target_values(sigma(self.params, np.asarray(t, dtype=float)))

    def window(self) -> float:
        """Half-width of the band around omega0 where the reduced recurrence is valid."""
        return 1.0 / (self.rate * (1.0 - self.params.q))


def adjustment_problem(spec: AdjustmentSpec) -> VariationalProblem:
    """Both ends free; E and ybar are bound per lattice point."""
    return VariationalProblem(
        params=spec.params, a=0.0, b=spec.T,
        lagrangian=ex.parse(ADJUSTMENT_LAGRANGIAN, parameters=('E', 'alpha', 'ybar')),
        parameters={'alpha': spec.alpha, 'r': spec.r, 'T': spec.T},
        point_parameters={'E': spec.discount, 'ybar': spec.target_after_step},
        name='adjustment',
    )


def _march(spec: AdjustmentSpec, points: np.ndarray, start: float,
           kicks: Optional[np.ndarray] = None) -> tuple[np.ndarray, float]:
    """Orbit values from y_0 = start under the reduced recurrence.

    kicks[k] is added to D[y](t_k) once it is formed. The returned slope is
    the one the recurrence produces past the last point.
    """
    params = spec.params
    z, alpha = spec.rate, spec.alpha
    n = points.size
    d = ((params.q - 1.0) * points + params.omega).tolist()
    ybar = spec.target_values(points).tolist()
    kicks = [0.0] * n if kicks is None else np.asarray(kicks, dtype=float).tolist()
    y = [0.0] * n
    y[0] = float(start)
    slope = kicks[0]
    for k in range(n - 1):
        y[k + 1] = y[k] + d[k] * slope
        forcing = (1.0 - z * d[k]) * alpha * (y[k + 1] - ybar[k + 1])
        slope = slope + d[k] * (forcing - z * slope) + kicks[k + 1]
    return np.array(y), slope


def adjustment_shooting_solve(spec: AdjustmentSpec, depth: int = 60, tol: float = 1e-12,
                              min_step_scale: float = DEFAULT_MIN_STEP_SCALE) -> GridFunction:
    """Shoot from both ends of [0, T] and match the orbit continuations at omega0.

    Solves the same discrete problem as solve_direct on adjustment_problem(spec).
    Off the three tail nodes of an orbit the stationarity rows are the reduced
    recurrence; at a node the slope takes a kick from the continued terms and
    from the omega0 tie multipliers. Unknowns are the starting values, the two
    tie multipliers and the values at the two deepest nodes of each orbit.
    When T sits on omega0 the b-orbit is constant at the a-orbit's limit and
    carries no multipliers.
    """
    if depth < 3:
        raise ParameterError(f"shooting needs depth >= 3, got {depth}")
    params = spec.params
    lattice = working_lattice(params, 0.0, spec.T, depth, min_step_scale)
    N = lattice.depth
    omega0 = params.omega0
    points = {name: np.array(lattice.orbit(name).points) for name in ('a', 'b')}
    half_width = spec.window()
    for name, pts in points.items():
        worst = float(np.max(np.abs(pts - omega0)))
        if worst >= half_width:
            raise ValidityWindowError(
                f"orbit {name} reaches |t - omega0| = {worst:.6g}, outside the window "
                f"{half_width:.6g} where the reduced recurrence holds")

    problem = adjustment_problem(spec)
    disc = Discretization(problem, lattice)
    derivs = Derivatives(problem.lagrangian, second=False)
    live = [orbit.name for orbit in disc.live_orbits()]
    both = len(live) == 2
    nodes = tail_nodes(params.q, N)
    discount = {name: spec.discount(points[name][nodes]) for name in live}
    # series weight c_k = rho * d_k
    rho = {'a': 1.0, 'b': -1.0}
    # the omega0 tie rows read the a-continuation minus the b-continuation
    tie_side = {'a': 1.0, 'b': -1.0}

    def unpack(u: np.ndarray):
        starts = dict(zip(live, u[:len(live)]))
        mu = u[len(live):len(live) + 2] if both else np.zeros(2)
        rest = u[len(live) + (2 if both else 0):]
        return starts, mu, {name: rest[2 * i:2 * i + 2] for i, name in enumerate(live)}

    def shoot(name: str, start: float, mu: np.ndarray, deep: np.ndarray):
        orbit = disc.orbits[name]
        plain, _ = _march(spec, points[name], start)
        zvec = np.zeros(disc.size)
        zvec[orbit.tail_cols] = [plain[nodes[0]], deep[0], deep[1]]
        tie = tie_side[name] * (mu[0] * orbit.quad.gamma + mu[1] * orbit.quad.beta)
        flux = disc.tail_gradient(name, zvec, derivs) - tie
        kicks = np.zeros(N + 1)
        kicks[nodes] = flux / (2.0 * rho[name] * discount[name])
        return _march(spec, points[name], start, kicks)

    def mismatch(u: np.ndarray) -> np.ndarray:
        starts, mu, deep = unpack(u)
        out, tails = [], {}
        for name in live:
            y, slope = shoot(name, starts[name], mu, deep[name])
            out += [y[nodes[1]] - deep[name][0], y[N] - deep[name][1], slope]
            tails[name] = y[nodes]
        if both:
            qa, qb = disc.orbits['a'].quad, disc.orbits['b'].quad
            out += [qa.gamma @ tails['a'] - qb.gamma @ tails['b'],
                    qa.beta @ tails['a'] - qb.beta @ tails['b']]
        return np.array(out, dtype=float)

    guess = [spec.target_values(points[name][:1])[0] for name in live]
    guess += [0.0, 0.0] if both else []
    for name in live:
        guess += list(spec.target_values(points[name][nodes[1:]]))
    guess = np.array(guess, dtype=float)

    start_residual = float(np.max(np.abs(mismatch(guess))))
    if start_residual <= tol * (1.0 + float(np.max(np.abs(guess)))):
        logger.debug("shooting guess already matches, mismatch %.3e", start_residual)
        solution_x = guess
    else:
        solution = scipy.optimize.root(mismatch, guess, method='hybr', tol=tol)
        residual = float(np.max(np.abs(mismatch(solution.x))))
        bound = max(tol, 1e-8) * (1.0 + float(np.max(np.abs(solution.x))))
        if residual > bound:
            raise NonConvergenceError(
                f"shooting did not match the orbit tails: {solution.message} "
                f"(mismatch {residual:.3e})", int(solution.nfev), residual)
        logger.debug("shooting matched after %d evaluations, mismatch %.3e",
                     solution.nfev, residual)
        solution_x = solution.x

    starts, mu, deep = unpack(solution_x)
    values, limits = {}, []
    for name in live:
        values[name], _ = shoot(name, starts[name], mu, deep[name])
        limits.append(float(disc.orbits[name].quad.gamma @ values[name][nodes]))
    for name in ('a', 'b'):
        if name not in values:
            values[name] = np.full(N + 1, limits[0])
    return GridFunction(lattice, values['a'], values['b'], float(np.mean(limits)))


def adjustment_weighted_el_residual(spec: AdjustmentSpec, gf: GridFunction) -> OrbitResiduals:
    """E(t) alpha (y(sigma t) - ybar(sigma t)) - D[E D[y]](t) at k = 0..N-2.

    Holds on the whole lattice, unlike the reduced recurrence.
    """
    params = spec.params
    N = gf.lattice.depth
    out = {}
    for name in ('a', 'b'):
        pts = np.array(gf.lattice.orbit(name).points)
        if is_fixed_point(params, pts[0]):
            out[name] = np.zeros(0)
            continue
        y = gf.values(name)
        d = (params.q - 1.0) * pts[:N] + params.omega
        weight = spec.discount(pts)
        slope = np.diff(y) / d
        flux = weight[:N] * slope
        lhs = weight[:N - 1] * spec.alpha * (y[1:N] - spec.target_values(pts[1:N]))
        out[name] = lhs - np.diff(flux) / d[:N - 1]
    return OrbitResiduals(out['a'], out['b'])


class ContinuousAdjustmentOracle:
    """Closed-form solution of alpha (y - t) = (r-1) y' + y'' with y'(0) = y'(T) = 0.

    The characteristic roots are real and distinct for r > 1, alpha > 0, so
    the 2x2 boundary system is never singular.
    """

    def __init__(self, r: float, alpha: float, T: float):
        if not r > 1.0 or not alpha > 0.0 or not T > 0.0:
            raise ParameterError(f"need r > 1, alpha > 0, T > 0; got {r!r}, {alpha!r}, {T!r}")
        self.r, self.alpha, self.T = float(r), float(alpha), float(T)
        rate = self.r - 1.0
        root = math.sqrt(rate * rate + 4.0 * self.alpha)
        self.m1 = (-rate + root) / 2.0
        self.m2 = (-rate - root) / 2.0
        self.shift = rate / self.alpha
        system = np.array([
            [self.m1, self.m2],
            [self.m1 * math.exp(self.m1 * self.T), self.m2 * math.exp(self.m2 * self.T)],
        ])
        self.A, self.B = scipy.linalg.solve(system, np.array([-1.0, -1.0]))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return t + self.shift + self.A * np.exp(self.m1 * t) + self.B * np.exp(self.m2 * t)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        return 1.0 + self.A * self.m1 * np.exp(self.m1 * t) + self.B * self.m2 * np.exp(self.m2 * t)

    def second_derivative(self, t):
        t = np.asarray(t, dtype=float)
        return (self.A * self.m1 ** 2 * np.exp(self.m1 * t)
                + self.B * self.m2 ** 2 * np.exp(self.m2 * t))

    def residual(self, t):
        return (self.alpha * (self(t) - np.asarray(t, dtype=float))
                - (self.r - 1.0) * self.derivative(t) - self.second_derivative(t))


def continuous_adjustment_oracle(r: float, alpha: float, T: float) -> ContinuousAdjustmentOracle:
    return ContinuousAdjustmentOracle(r, alpha, T)


def grid_distance(gf: GridFunction, f: Callable) -> float:
    """sup over stored orbit points of |gf - f|."""
    worst = 0.0
    for name in ('a', 'b'):
        pts = np.array(gf.lattice.orbit(name).points)
        worst = max(worst, float(np.max(np.abs(gf.values(name) - np.asarray(f(pts), dtype=float)))))
    return worst


@dataclass(frozen=True)
class ContinuumPoint:
    k: int
    q: float
    omega: float
    depth: int
    distance: float


CONTINUUM_METHODS = ('direct', 'shooting')


def continuum_study(r: float = 1.05, alpha: float = 1.0, T: float = 1.0,
                    ks: Sequence[int] = (1, 2, 3), depth: int = 10_000,
                    method: str = 'direct') -> list[ContinuumPoint]:
    """Distance of the discrete solution to the continuous oracle along (1 - 10^-k, 10^-k).

    method picks solve_direct on the adjustment problem or the shooting solver.
    """
    if method not in CONTINUUM_METHODS:
        raise ParameterError(f"method must be one of {CONTINUUM_METHODS}, got {method!r}")
    oracle = continuous_adjustment_oracle(r, alpha, T)
    study = []
    for k in ks:
        step = 10.0 ** (-k)
        params = HahnParams(1.0 - step, step)
        spec = AdjustmentSpec(params, r=r, alpha=alpha, T=T)
        if method == 'shooting':
            gf = adjustment_shooting_solve(spec, depth=depth)
        else:
            report = solve_direct(adjustment_problem(spec), opts=SolveOptions(depth=depth))
            if not report.converged:
                raise NonConvergenceError(
                    f"direct solve did not converge at k={k} ({report.message})",
                    report.iterations, report.gradient_norm)
            gf = report.minimizer
        distance = grid_distance(gf, oracle)
        logger.info("continuum k=%d depth=%d distance=%.3e", k, gf.lattice.depth, distance)
        study.append(ContinuumPoint(k, params.q, params.omega, gf.lattice.depth, distance))
    return study


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CatalogEntry:
    name: str
    default_q: float
    default_omega: float
    parameters: Mapping[str, float]
    build: Callable[[HahnParams, Mapping[str, float]], tuple[VariationalProblem, Optional[ClosedForm]]]


def _build_example1(params, values):
    return example1_problem(params)


def _build_example2(params, values):
    return example2_problem(params, values['gamma'], values['nu'])


def _build_limit(params, values):
    return example2_limit_problem(params)


def _build_adjustment(params, values):
    spec = AdjustmentSpec(params, r=values['r'], alpha=values['alpha'], T=values['T'])
    return adjustment_problem(spec), None


CATALOG = {
    'example1': CatalogEntry('example1', 0.99, 0.02, {}, _build_example1),
    'example2': CatalogEntry('example2', 0.99, 0.02, {'gamma': 2.0, 'nu': 2.0}, _build_example2),
    'example2-limit': CatalogEntry('example2-limit', 0.99, 0.02, {}, _build_limit),
    'adjustment': CatalogEntry('adjustment', 0.9, 0.05,
                               {'r': 1.05, 'alpha': 1.0, 'T': 1.0}, _build_adjustment),
}


def catalog_problem(name: str, q: Optional[float] = None, omega: Optional[float] = None,
                    overrides: Optional[Mapping[str, float]] = None
                    ) -> tuple[VariationalProblem, Optional[ClosedForm]]:
    """Build a catalog problem; unknown parameter names are rejected."""
    try:
        entry = CATALOG[name]
    except KeyError:
        raise ParameterError(f"unknown problem {name!r}; choose from {sorted(CATALOG)}") from None
    values = dict(entry.parameters)
    for key, value in (overrides or {}).items():
        if key not in values:
            raise ParameterError(f"{name} has no parameter {key!r}; it takes {sorted(values) or 'none'}")
        values[key] = float(value)
    params = HahnParams(entry.default_q if q is None else q,
                        entry.default_omega if omega is None else omega)
    return entry.build(params, values)
