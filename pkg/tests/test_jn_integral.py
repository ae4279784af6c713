"""
Tests for Jackson-Norlund integration and its residual checkers.
"""

import math
import os
import sys
import unittest

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.errors import LatticeMismatchError, NonConvergenceError, ParameterError
from src.hahn_core import HahnParams
from src.jn_integral import (
    QuadratureSpec,
    fundamental_theorem_residual,
    grid_integral,
    integral,
    integral_from_omega0,
    integral_info,
    integration_by_parts_residual,
    positivity_check,
    triangle_inequality_gap,
)

HALF = HahnParams(0.5, 0.5)


def polynomial(coefficients):
    def f(t):
        return float(np.polyval(coefficients, t))
    return f


def power_of_two_indicator(t):
    """1 where -t is an integer power of two, else 0."""
    exponent = math.log2(-t)
    return 1.0 if abs(exponent - round(exponent)) < 1e-9 else 0.0


class TestAnchoredIntegral(unittest.TestCase):

    def test_zero_at_omega0(self):
        result = integral_from_omega0(lambda t: t ** 2, HALF, HALF.omega0)
        self.assertEqual(result, (0.0, 0, 0.0))

    def test_unit_integrand(self):
        for params in (HALF, HahnParams(0.9, 0.05), HahnParams(0.7, 0.0)):
            for x in (-2.0, 0.3, 4.0):
                value = integral_from_omega0(lambda t: 1.0, params, x).value
                self.assertAlmostEqual(value, x - params.omega0, places=10)

    def test_tail_estimate_is_small(self):
        result = integral_from_omega0(lambda t: 1.0, HahnParams(0.9, 0.05), 2.0)
        self.assertGreater(result.terms, 10)
        self.assertLess(result.tail_estimate, 1e-10)

    def test_term_limit(self):
        with self.assertRaises(NonConvergenceError) as ctx:
            integral_from_omega0(lambda t: 1.0, HahnParams(0.99, 0.0), 1.0,
                                 QuadratureSpec(max_terms=5))
        self.assertEqual(ctx.exception.terms, 5)

    def test_fixed_depth(self):
        spec = QuadratureSpec(max_terms=3, mode='fixed_depth')
        result = integral_from_omega0(lambda t: 1.0, HALF, 3.0, spec)
        self.assertEqual(result.terms, 3)
        self.assertAlmostEqual(result.value, 1.0 * (1 + 0.5 + 0.25))

    def test_spec_validation(self):
        with self.assertRaises(ParameterError):
            QuadratureSpec(max_terms=0)
        with self.assertRaises(ParameterError):
            QuadratureSpec(tail_tol=0.0)
        with self.assertRaises(ParameterError):
            QuadratureSpec(mode='adaptive')


class TestIntervalIntegral(unittest.TestCase):

    def test_empty_interval(self):
        self.assertEqual(integral(math.exp, HALF, 0.7, 0.7), 0.0)

    def test_swap_negates(self):
        params = HahnParams(0.8, 0.1)
        f = polynomial([1.0, -2.0, 0.5])
        self.assertEqual(integral(f, params, -1.0, 2.0), -integral(f, params, 2.0, -1.0))

    def test_constant(self):
        params = HahnParams(0.9, 0.05)
        self.assertAlmostEqual(integral(lambda t: 3.0, params, -1.0, 2.0), 9.0, places=10)

    def test_info_adds_terms(self):
        params = HahnParams(0.9, 0.05)
        info = integral_info(lambda t: 1.0, params, 0.0, 1.0)
        upper = integral_from_omega0(lambda t: 1.0, params, 1.0)
        lower = integral_from_omega0(lambda t: 1.0, params, 0.0)
        self.assertEqual(info.terms, upper.terms + lower.terms)

    def test_grid_integral_depth_zero(self):
        self.assertEqual(grid_integral([3.0], [5.0], HALF, 0.0, 2.0, 0), 4.0)

    def test_grid_integral_matches_truncated_series(self):
        params = HahnParams(0.5, 0.0)
        depth = 60
        points_a = [1.0 * 0.5 ** k for k in range(depth + 1)]
        points_b = [2.0 * 0.5 ** k for k in range(depth + 1)]
        value = grid_integral([t * t for t in points_a], [t * t for t in points_b],
                              params, 1.0, 2.0, depth)
        self.assertAlmostEqual(value, integral(lambda t: t * t, params, 1.0, 2.0), places=12)

    def test_grid_integral_shape(self):
        with self.assertRaises(LatticeMismatchError):
            grid_integral([1.0, 2.0], [1.0], HALF, 0.0, 2.0, 1)


class TestResidualCheckers(unittest.TestCase):

    def test_fundamental_theorem(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            params = HahnParams(rng.uniform(0.5, 0.95), rng.uniform(0.0, 0.5))
            f = polynomial(rng.uniform(-1.0, 1.0, int(rng.integers(1, 5))))
            a, b = sorted(rng.uniform(-2.0, 2.0, 2))
            self.assertLess(fundamental_theorem_residual(f, params, a, b), 1e-9)

    def test_integration_by_parts(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            params = HahnParams(rng.uniform(0.5, 0.95), rng.uniform(0.0, 0.5))
            f = polynomial(rng.uniform(-1.0, 1.0, 3))
            g = polynomial(rng.uniform(-1.0, 1.0, 3))
            a, b = sorted(rng.uniform(-2.0, 2.0, 2))
            self.assertLess(integration_by_parts_residual(f, g, params, a, b), 1e-9)

    def test_positivity(self):
        above = positivity_check(lambda t: 1.0, HALF, 3.0)
        self.assertTrue(above)
        self.assertTrue(above.omega0_below)
        self.assertAlmostEqual(above.oriented_integral, 2.0)

        below = positivity_check(lambda t: 1.0, HALF, -1.0)
        self.assertTrue(below)
        self.assertFalse(below.omega0_below)
        self.assertAlmostEqual(below.oriented_integral, 2.0)

        negative = positivity_check(lambda t: -1.0, HALF, 3.0)
        self.assertFalse(negative)
        self.assertFalse(negative.hypothesis_met)

    def test_triangle_inequality_can_fail(self):
        params = HahnParams(0.5, 0.0)
        gap = triangle_inequality_gap(power_of_two_indicator, params, -3.0, -1.0)
        self.assertAlmostEqual(gap, -2.0, places=10)

    def test_triangle_inequality_holds_above_omega0(self):
        params = HahnParams(0.5, 0.0)
        f = polynomial([1.0, -1.0])
        self.assertGreaterEqual(triangle_inequality_gap(f, params, 0.0, 3.0), -1e-12)


if __name__ == "__main__":
    unittest.main()
