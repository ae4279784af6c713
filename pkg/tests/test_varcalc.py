"""
Tests for the variational engine: functional evaluation, residuals,
solvers and the convexity probe.
"""

import os
import sys
import unittest

import numpy as np
import scipy.sparse as sp

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src import expr as ex
from src.errors import LatticeMismatchError, ParameterError, UsageError
from src.hahn_core import GridFunction, HahnParams, build_lattice, grid_from_function
from src.jn_integral import integral
from src.models import example1_problem, example2_limit_problem, example2_problem
from src.varcalc import (
    BoundarySpec,
    Constraint,
    ConvexityVerdict,
    Discretization,
    EndCondition,
    NewtonSystem,
    SolveOptions,
    TailQuadratic,
    VariationalProblem,
    check_gradient,
    constraint_value,
    convexity_probe,
    damped_newton,
    el_residual,
    first_variation,
    functional_value,
    integrand_terms,
    nbc_residual_a,
    nbc_residual_b,
    solve,
    solve_direct,
    solve_isoperimetric,
    working_lattice,
)


def max_error(gf, f):
    worst = 0.0
    for name in ('a', 'b'):
        points = np.array(gf.lattice.orbit(name).points)
        worst = max(worst, float(np.max(np.abs(gf.values(name) - f(points)))))
    return worst


class TestProblemTypes(unittest.TestCase):

    def test_end_condition_text(self):
        self.assertEqual(str(EndCondition.free()), 'free')
        self.assertEqual(str(EndCondition.fixed(1.5)), 'fixed:1.5')
        with self.assertRaises(ParameterError):
            EndCondition.fixed(float('nan'))

    def test_problem_validation(self):
        params = HahnParams(0.9, 0.05)
        with self.assertRaises(ParameterError):
            VariationalProblem(params, 1.0, 0.0, ex.parse("y"))
        with self.assertRaises(ParameterError):
            VariationalProblem(params, 0.0, 1.0, ex.parse("y"), sense='sup')
        with self.assertRaises(ParameterError):
            VariationalProblem(params, 0.0, 1.0, ex.parse("k*y", parameters=['k']))
        with self.assertRaises(ParameterError):
            VariationalProblem(params, 0.0, 1.0, ex.parse("y"), parameters={'t': 1.0})

    def test_solve_options_validation(self):
        with self.assertRaises(ParameterError):
            SolveOptions(depth=1)
        with self.assertRaises(ParameterError):
            SolveOptions(tol=0.0)
        with self.assertRaises(ParameterError):
            SolveOptions(omega0_tie_weight=-1.0)


class TestLatticeAndTail(unittest.TestCase):

    def test_working_lattice_caps_depth(self):
        self.assertEqual(working_lattice(HahnParams(0.9, 0.01), 0.0, 1.0, 60).depth, 43)
        self.assertEqual(working_lattice(HahnParams(0.5, 1.0), 0.0, 1.0, 60).depth, 8)
        self.assertEqual(working_lattice(HahnParams(0.9, 0.01), 0.0, 1.0, 20).depth, 20)

    def test_tail_quadratic_reproduces_quadratics(self):
        quad = TailQuadratic([3.0, 2.0, 1.0])
        values = np.array([2 * s * s - s + 5 for s in (3.0, 2.0, 1.0)])
        self.assertAlmostEqual(float(quad.gamma @ values), 5.0)
        self.assertAlmostEqual(float(quad.beta @ values), -1.0)
        self.assertAlmostEqual(float(quad.weights(np.array([0.5]))[0] @ values), 5.0)
        slope = quad.slopes_between(np.array([0.2]), np.array([0.6]))[0] @ values
        self.assertAlmostEqual(float(slope), 0.6)


class TestResiduals(unittest.TestCase):

    def setUp(self):
        self.params = HahnParams(0.9, 0.05)
        self.problem, self.closed_form = example1_problem(self.params)
        self.lattice = build_lattice(self.params, 0.0, 1.0, 20)
        self.gf = grid_from_function(self.lattice, self.closed_form)

    def test_closed_form_is_stationary(self):
        residuals = el_residual(self.problem, self.gf)
        self.assertEqual(residuals.a.size, 19)
        self.assertLess(residuals.max_abs(), 1e-9)
        self.assertLess(abs(nbc_residual_a(self.problem, self.gf)), 1e-9)

    def test_other_candidate_is_not(self):
        gf = grid_from_function(self.lattice, lambda t: t)
        self.assertGreater(el_residual(self.problem, gf).max_abs(), 0.5)

    def test_nbc_at_fixed_end(self):
        with self.assertRaises(UsageError):
            nbc_residual_b(self.problem, self.gf)

    def test_example2_closed_form(self):
        for q, omega in ((0.99, 0.2), (0.9, 0.05), (0.5, 1.0)):
            params = HahnParams(q, omega)
            problem, closed_form = example2_problem(params)
            gf = grid_from_function(build_lattice(params, 0.0, 1.0, 8), closed_form)
            with self.subTest(q=q, omega=omega):
                self.assertLess(el_residual(problem, gf).max_abs(), 1e-8)
                self.assertLess(abs(nbc_residual_a(problem, gf)), 1e-8)
                self.assertLess(abs(nbc_residual_b(problem, gf)), 1e-8)

    def test_integrand_terms(self):
        terms = integrand_terms(self.problem, self.gf)
        self.assertEqual(terms['b'].t.size, 20)
        np.testing.assert_allclose(terms['b'].d2, 1.0)
        np.testing.assert_allclose(terms['b'].d4, 0.0)

    def test_lattice_mismatch(self):
        other = grid_from_function(build_lattice(HahnParams(0.8, 0.05), 0.0, 1.0, 20), abs)
        with self.assertRaises(LatticeMismatchError):
            functional_value(self.problem, other)


class TestFunctional(unittest.TestCase):

    def test_ordering_of_closed_forms(self):
        params = HahnParams(0.99, 0.02)
        problem, best = example1_problem(params)
        _, limit = example2_limit_problem(params)
        lattice = working_lattice(params, 0.0, 1.0, 60)
        first = functional_value(problem, grid_from_function(lattice, best))
        second = functional_value(problem, grid_from_function(lattice, limit))
        self.assertLess(first, second)
        self.assertAlmostEqual(first, 5.0 / 6.0, delta=0.05)
        self.assertAlmostEqual(second, 23.0 / 24.0, delta=0.05)

    def test_matches_series_integral(self):
        params = HahnParams(0.8, 0.1)
        problem = VariationalProblem(params, 0.0, 1.0, ex.parse("t*y"))
        lattice = build_lattice(params, 0.0, 1.0, 10)
        gf = grid_from_function(lattice, lambda t: t * t)
        expected = integral(lambda t: t * (0.8 * t + 0.1) ** 2, params, 0.0, 1.0)
        self.assertAlmostEqual(functional_value(problem, gf), expected, places=11)

    def test_gradient_matches_finite_differences(self):
        params = HahnParams(0.9, 0.05)
        problem = VariationalProblem(
            params, 0.0, 1.0, ex.parse("exp(y)*Dy^2/2 + sin(t)*y^3 + ya*yb"))
        gf = grid_from_function(build_lattice(params, 0.0, 1.0, 10), np.cos)
        self.assertLess(check_gradient(problem, gf), 1e-6)

    def test_first_variation(self):
        params = HahnParams(0.9, 0.05)
        problem, _ = example2_problem(params)
        lattice = build_lattice(params, 0.0, 1.0, 12)
        gf = grid_from_function(lattice, np.sin)
        h = grid_from_function(lattice, lambda t: 1.0 + t * t)
        eps = 1e-6
        up = grid_from_function(lattice, lambda t: np.sin(t) + eps * (1.0 + t * t))
        down = grid_from_function(lattice, lambda t: np.sin(t) - eps * (1.0 + t * t))
        numeric = (functional_value(problem, up) - functional_value(problem, down)) / (2 * eps)
        self.assertAlmostEqual(first_variation(problem, gf, h), numeric, places=6)

    def test_first_variation_on_random_problems(self):
        rng = np.random.default_rng(2024)
        custom = ex.parse("exp(y)*Dy^2/2 + sin(t)*y^3 + ya*yb")
        for trial in range(50):
            q = rng.uniform(0.5, 0.95)
            params = HahnParams(q, rng.uniform(0.0, 1.0 - q))
            kind = trial % 3
            if kind == 0:
                problem, _ = example1_problem(params)
            elif kind == 1:
                problem, _ = example2_problem(params, *rng.uniform(1.0, 5.0, 2))
            else:
                problem = VariationalProblem(params, 0.0, 1.0, custom)
            lattice = build_lattice(params, 0.0, 1.0, int(rng.integers(4, 13)))
            y_coef, h_coef = rng.uniform(-1.0, 1.0, (2, 4))
            gf = grid_from_function(lattice, lambda t: np.polyval(y_coef, t))
            h = grid_from_function(lattice, lambda t: np.polyval(h_coef, t))
            eps = 1e-6
            up = grid_from_function(lattice, lambda t: np.polyval(y_coef + eps * h_coef, t))
            down = grid_from_function(lattice, lambda t: np.polyval(y_coef - eps * h_coef, t))
            numeric = (functional_value(problem, up) - functional_value(problem, down)) / (2 * eps)
            with self.subTest(trial=trial, q=params.q, omega=params.omega):
                self.assertAlmostEqual(first_variation(problem, gf, h), numeric,
                                       delta=1e-5 * (1.0 + abs(numeric)))

    def test_random_admissible_variations_vanish_at_solution(self):
        params = HahnParams(0.99, 0.02)
        problem, _ = example2_limit_problem(params)
        report = solve_direct(problem, opts=SolveOptions(depth=40))
        self.assertTrue(report.converged)
        lattice = report.minimizer.lattice
        A = Discretization(problem, lattice).constraints(problem.boundary)[0].toarray()
        projector = np.linalg.pinv(A)
        N = lattice.depth
        rng = np.random.default_rng(5)
        for trial in range(20):
            h = rng.normal(size=2 * (N + 1))
            h -= projector @ (A @ h)
            variation = GridFunction(lattice, h[:N + 1], h[N + 1:], 0.0)
            with self.subTest(trial=trial):
                self.assertLess(abs(first_variation(problem, report.minimizer, variation)), 1e-6)

    def test_admissible_variations_vanish_at_minimizer(self):
        params = HahnParams(0.99, 0.02)
        problem, closed_form = example1_problem(params)
        lattice = working_lattice(params, 0.0, 1.0, 40)
        gf = grid_from_function(lattice, closed_form)
        for h in (lambda t: t * (1.0 - t), lambda t: 1.0 - t, lambda t: (1.0 - t) * (2.0 + t)):
            self.assertLess(abs(first_variation(problem, gf, grid_from_function(lattice, h))), 1e-9)


class TestSolveDirect(unittest.TestCase):

    def test_example1(self):
        for q, omega in ((0.9, 0.05), (0.99, 0.02)):
            params = HahnParams(q, omega)
            problem, closed_form = example1_problem(params)
            report = solve_direct(problem, opts=SolveOptions(depth=60))
            with self.subTest(q=q, omega=omega):
                self.assertTrue(report.converged)
                self.assertLess(max_error(report.minimizer, closed_form), 1e-6)
                self.assertLess(report.el_residuals.max_abs(), 1e-5)
                self.assertIsNone(report.nbc_b)
                self.assertLess(abs(report.nbc_a), 1e-6)
                self.assertAlmostEqual(report.minimizer.value_omega0,
                                       closed_form(params.omega0), places=6)

    def test_example2(self):
        for q, omega in ((0.99, 0.0), (0.99, 0.2), (0.99, 0.5), (0.5, 1.0)):
            params = HahnParams(q, omega)
            problem, closed_form = example2_problem(params)
            report = solve(problem)
            with self.subTest(q=q, omega=omega):
                self.assertTrue(report.converged)
                self.assertLess(max_error(report.minimizer, closed_form), 1e-6)

    def test_degenerate_orbit_is_tied(self):
        params = HahnParams(0.99, 0.0)
        problem, closed_form = example2_problem(params)
        report = solve_direct(problem, opts=SolveOptions(depth=30))
        self.assertEqual(report.el_residuals.a.size, 0)
        np.testing.assert_allclose(report.minimizer.values_a, report.minimizer.values_a[0])
        self.assertAlmostEqual(report.minimizer.values_a[0], closed_form(0.0), places=6)

    def test_constant_minimizer(self):
        params = HahnParams(0.9, 0.05)
        problem = VariationalProblem(
            params, 0.0, 1.0, ex.parse("Dy^2/2"),
            boundary=BoundarySpec(EndCondition.fixed(3.0), EndCondition.fixed(3.0)))
        report = solve_direct(problem, opts=SolveOptions(depth=20))
        self.assertTrue(report.converged)
        self.assertLess(max_error(report.minimizer, lambda t: 3.0 + 0.0 * t), 1e-8)
        self.assertAlmostEqual(report.functional_value, 0.0, places=10)

    def test_penalty_tends_to_fixed_ends(self):
        params = HahnParams(0.9, 0.05)
        _, limit = example2_limit_problem(params)
        points = np.linspace(0.0, 1.0, 11)
        distances = []
        for weight in (10.0, 100.0, 1e4, 1e6):
            _, closed_form = example2_problem(params, weight, weight)
            distances.append(float(np.max(np.abs(closed_form(points) - limit(points)))))
        self.assertEqual(distances, sorted(distances, reverse=True))
        self.assertLess(distances[-1], 1e-4)

        problem, closed_form = example2_problem(params, 100.0, 100.0)
        report = solve_direct(problem, opts=SolveOptions(depth=20, tol=1e-8))
        self.assertLess(max_error(report.minimizer, closed_form), 1e-6)

    def test_soft_tie(self):
        params = HahnParams(0.9, 0.05)
        problem, closed_form = example1_problem(params)
        report = solve_direct(problem, opts=SolveOptions(depth=20, omega0_tie_weight=1e3))
        self.assertTrue(report.converged)
        # the penalty leaves an O(1/weight) mismatch at omega0
        self.assertLess(max_error(report.minimizer, closed_form), 1e-2)

    def test_penalized_solutions_approach_the_fixed_end_problem(self):
        params = HahnParams(0.99, 0.02)
        _, limit = example2_limit_problem(params)
        distances = []
        for weight in (1e2, 1e4, 1e6):
            problem, closed_form = example2_problem(params, weight, weight)
            report = solve_direct(problem, opts=SolveOptions(depth=30))
            with self.subTest(weight=weight):
                self.assertTrue(report.converged)
                self.assertLess(max_error(report.minimizer, closed_form), 1e-5)
            distances.append(max_error(report.minimizer, limit))
        self.assertGreater(distances[0], distances[1])
        self.assertGreater(distances[1], distances[2])
        self.assertLess(distances[-1], 1e-4)

    def test_stiff_soft_tie(self):
        params = HahnParams(0.9, 0.05)
        problem, closed_form = example1_problem(params)
        report = solve_direct(problem, opts=SolveOptions(depth=20, omega0_tie_weight=1e6))
        self.assertTrue(report.converged)
        self.assertLess(max_error(report.minimizer, closed_form), 1e-2)

    def test_max_sense(self):
        params = HahnParams(0.9, 0.05)
        problem = VariationalProblem(
            params, 0.0, 1.0, ex.parse("-(y + (1/2)*Dy^2)"), sense='max',
            boundary=BoundarySpec(EndCondition.free(), EndCondition.fixed(1.0)))
        _, closed_form = example1_problem(params)
        report = solve_direct(problem, opts=SolveOptions(depth=20))
        self.assertTrue(report.converged)
        self.assertLess(max_error(report.minimizer, closed_form), 1e-6)


class _ScaledLine(NewtonSystem):
    """F(x) = scale (x - 1/3), whose rounding error alone exceeds a tight tol."""

    def __init__(self, scale):
        self.scale = scale

    def residual(self, x):
        return self.scale * (x - 1.0 / 3.0)

    def jacobian(self, x):
        return sp.csr_matrix([[self.scale]])


class _NoRoot(NewtonSystem):

    def residual(self, x):
        return x * x + 1.0

    def jacobian(self, x):
        return sp.csr_matrix([[2.0 * x[0]]])


class TestDampedNewton(unittest.TestCase):

    def test_rounding_floor_counts_as_converged(self):
        result = damped_newton(_ScaledLine(1e12), np.array([5.0]), tol=1e-10, max_iter=20)
        self.assertTrue(result.converged)
        self.assertAlmostEqual(result.x[0], 1.0 / 3.0, places=12)

    def test_stall_away_from_a_root(self):
        result = damped_newton(_NoRoot(), np.array([1.0]), tol=1e-10, max_iter=20)
        self.assertFalse(result.converged)
        self.assertGreaterEqual(result.residual_norm, 1.0)


class TestIsoperimetric(unittest.TestCase):

    def setUp(self):
        self.params = HahnParams(0.9, 0.01)
        self.pinned = BoundarySpec(EndCondition.fixed(0.0), EndCondition.fixed(0.0))

    def test_normal_multiplier(self):
        gamma = 0.1
        q = self.params.q
        problem = VariationalProblem(
            self.params, 0.0, 1.0, ex.parse("Dy^2/2"), boundary=self.pinned,
            constraint=Constraint(ex.parse("y"), gamma))
        omega = self.params.omega
        lam = -gamma * (q + 1.0) / integral(lambda t: (q * t + omega) ** 2 - (q * t + omega),
                                            self.params, 0.0, 1.0)
        self.assertAlmostEqual(lam, 1.085925185926, places=9)
        report = solve_isoperimetric(problem)
        self.assertTrue(report.converged)
        self.assertEqual(report.lambda0, 1)
        self.assertAlmostEqual(report.multiplier, lam, delta=1e-6 * abs(lam))
        self.assertAlmostEqual(report.constraint_value, gamma, places=9)
        self.assertLess(max_error(report.minimizer, lambda t: -lam * (t * t - t) / (q + 1.0)), 1e-6)
        self.assertLess(report.el_residuals.max_abs(), 1e-5)

    def test_inactive_constraint(self):
        params = HahnParams(0.9, 0.05)
        gamma = integral(lambda t: t, params, 0.0, 1.0)
        problem = VariationalProblem(
            params, 0.0, 1.0, ex.parse("Dy^2/2"),
            boundary=BoundarySpec(EndCondition.fixed(0.0), EndCondition.fixed(1.0)),
            constraint=Constraint(ex.parse("y"), gamma))
        report = solve(problem, opts=SolveOptions(depth=20))
        self.assertEqual(report.lambda0, 1)
        self.assertLess(abs(report.multiplier), 1e-8)
        self.assertLess(max_error(report.minimizer, lambda t: t), 1e-8)

    def test_abnormal_extremal(self):
        # y = t is the only admissible point and it extremizes the constraint
        params = HahnParams(0.5, 0.25)
        problem = VariationalProblem(
            params, 0.0, 1.0, ex.parse("y + Dy^2/2"),
            boundary=BoundarySpec(EndCondition.fixed(0.0), EndCondition.fixed(1.0)),
            constraint=Constraint(ex.parse("Dy^2/2"), 0.5))
        report = solve_isoperimetric(problem, opts=SolveOptions(depth=8))
        self.assertEqual(report.lambda0, 0)
        self.assertEqual(report.multiplier, 1.0)
        self.assertTrue(report.converged)
        self.assertEqual(report.message, 'abnormal extremal')
        self.assertLess(max_error(report.minimizer, lambda t: t), 1e-9)

    def test_needs_constraint(self):
        problem, _ = example1_problem(self.params)
        with self.assertRaises(UsageError):
            solve_isoperimetric(problem)
        with self.assertRaises(UsageError):
            constraint_value(problem, grid_from_function(build_lattice(self.params, 0.0, 1.0, 4),
                                                         lambda t: t))


class TestConvexityProbe(unittest.TestCase):

    def setUp(self):
        self.problem, _ = example1_problem(HahnParams(0.9, 0.05))

    def test_convex(self):
        verdict = convexity_probe(self.problem)
        self.assertEqual(verdict.kind, 'convex-evidence')
        self.assertEqual(verdict.samples, 2000)
        self.assertIsNone(verdict.witness)
        self.assertIn('global minimizer', verdict.sufficiency('min'))
        self.assertEqual(verdict.sufficiency('max'), 'sufficiency not established')

    def test_concave(self):
        verdict = convexity_probe(self.problem, lagrangian=ex.parse("-(Dy^2)"))
        self.assertEqual(verdict.kind, 'concave-evidence')
        self.assertIn('global maximizer', verdict.sufficiency('max'))

    def test_neither(self):
        verdict = convexity_probe(self.problem, box=(-1.0, 1.0), lagrangian=ex.parse("y^3"))
        self.assertEqual(verdict.kind, 'neither')
        self.assertLess(verdict.witness['convexity_violation']['gap'], 0.0)
        self.assertGreater(verdict.witness['concavity_violation']['gap'], 0.0)

    def test_report_sufficiency(self):
        report = solve_direct(self.problem, opts=SolveOptions(depth=10))
        self.assertIsNone(report.sufficiency)
        report.convexity = ConvexityVerdict('convex-evidence', 10)
        self.assertIn('global minimizer', report.sufficiency)

    def test_bad_arguments(self):
        with self.assertRaises(ParameterError):
            convexity_probe(self.problem, samples=0)
        with self.assertRaises(ParameterError):
            convexity_probe(self.problem, box=(1.0, -1.0))


if __name__ == "__main__":
    unittest.main()
