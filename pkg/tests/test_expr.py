"""
Tests for the Lagrangian expression language.
"""

import os
import sys
import unittest

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src import expr as ex
from src.errors import DiffError, EvalError, ParseError

POINT = {'t': 0.3, 'y': 0.7, 'Dy': 1.5, 'ya': -0.4, 'yb': 2.0}


class TestParse(unittest.TestCase):

    def test_structure(self):
        node = ex.parse("y + (1/2)*Dy^2")
        self.assertEqual(node, ex.Add(ex.Variable('y'),
                                      ex.Mul(ex.Div(ex.Number(1), ex.Number(2)),
                                             ex.Pow(ex.Variable('Dy'), ex.Number(2)))))

    def test_precedence_and_associativity(self):
        self.assertEqual(ex.parse("t - y - Dy"),
                         ex.Sub(ex.Sub(ex.Variable('t'), ex.Variable('y')), ex.Variable('Dy')))
        self.assertEqual(ex.parse("t^y^2"),
                         ex.Pow(ex.Variable('t'), ex.Pow(ex.Variable('y'), ex.Number(2))))
        self.assertEqual(ex.parse("-y^2"), ex.Neg(ex.Pow(ex.Variable('y'), ex.Number(2))))
        self.assertEqual(ex.parse("-3"), ex.Number(-3))

    def test_parameters(self):
        node = ex.parse("gamma*(yb - 1)^2", parameters=['gamma'])
        self.assertEqual(ex.names(node), {'gamma', 'yb'})
        self.assertTrue(ex.depends_on(node, 'yb'))
        self.assertFalse(ex.depends_on(node, 'y'))
        with self.assertRaises(ParseError):
            ex.parse("gamma*(yb - 1)^2")

    def test_error_positions(self):
        cases = {
            "y + * 2": 4,
            "foo": 0,
            "y $": 2,
            "(y": 2,
            "y y": 2,
            "sin y": 4,
            "y(2)": 1,
            "": 0,
        }
        for text, position in cases.items():
            with self.subTest(text=text):
                with self.assertRaises(ParseError) as ctx:
                    ex.parse(text)
                self.assertEqual(ctx.exception.position, position)
                self.assertTrue(ctx.exception.expected)


class TestPrint(unittest.TestCase):

    def test_canonical_text(self):
        self.assertEqual(ex.to_text(ex.parse("y+(1/2)*Dy^2")), "y + 1/2*Dy^2")
        self.assertEqual(ex.to_text(ex.parse("t - (y - Dy)")), "t - (y - Dy)")
        self.assertEqual(ex.to_text(ex.parse("(t*y)^2")), "(t*y)^2")
        self.assertEqual(ex.to_text(ex.parse("-(t + y)")), "-(t + y)")
        self.assertEqual(ex.to_text(ex.Number(0.25)), "0.25")

    def test_reparse_gives_same_tree(self):
        for text in ("y + (1/2)*Dy^2", "exp(t*y)/(1 + Dy^2)", "t^y^2 - -ya",
                     "(t - y)/(Dy*yb)", "sqrt(abs(y)) * cos(t)^3"):
            node = ex.parse(text)
            self.assertEqual(ex.parse(ex.to_text(node)), node)


class TestEvaluate(unittest.TestCase):

    def test_scalar(self):
        self.assertEqual(ex.evaluate(ex.parse("y + (1/2)*Dy^2"), {'y': 1.0, 'Dy': 2.0}), 3.0)

    def test_vectorized(self):
        node = ex.parse("t*y + Dy^2")
        env = {'t': np.array([1.0, 2.0]), 'y': np.array([3.0, 4.0]), 'Dy': 0.5}
        np.testing.assert_allclose(ex.evaluate(node, env), [3.25, 8.25])

    def test_domain_errors(self):
        for text, env in (("y", {}),
                          ("log(y)", {'y': 0.0}),
                          ("1/y", {'y': 0.0}),
                          ("sqrt(y)", {'y': -1.0}),
                          ("y^0.5", {'y': -1.0}),
                          ("exp(y)", {'y': 1e6})):
            with self.subTest(text=text):
                with self.assertRaises(EvalError):
                    ex.evaluate(ex.parse(text), env)


class TestDiff(unittest.TestCase):

    def test_simple_derivatives(self):
        self.assertEqual(ex.to_text(ex.derivative(ex.parse("y^2"), 'y')), "2*y")
        self.assertEqual(ex.to_text(ex.derivative(ex.parse("sin(y)"), 'y')), "cos(y)")
        self.assertEqual(ex.derivative(ex.parse("t^2"), 'y'), ex.ZERO)
        lagrangian = ex.parse("y + (1/2)*Dy^2")
        self.assertEqual(ex.evaluate(ex.derivative(lagrangian, 'Dy'), {'Dy': 3.0}), 3.0)

    def test_against_central_differences(self):
        node = ex.parse("exp(t*y) + y/Dy - log(Dy)*ya^3 + sqrt(yb) + t^Dy")
        h = 1e-6
        for var in ex.VARIABLES:
            with self.subTest(var=var):
                up = dict(POINT, **{var: POINT[var] + h})
                down = dict(POINT, **{var: POINT[var] - h})
                numeric = (ex.evaluate(node, up) - ex.evaluate(node, down)) / (2 * h)
                symbolic = ex.evaluate(ex.derivative(node, var), POINT)
                self.assertAlmostEqual(symbolic, numeric, places=5)

    def test_abs_is_rejected(self):
        with self.assertRaises(DiffError):
            ex.diff(ex.parse("abs(y) + Dy"), 'Dy')

    def test_unknown_variable(self):
        with self.assertRaises(DiffError):
            ex.diff(ex.parse("y"), 'q')


class TestFold(unittest.TestCase):

    def test_identities(self):
        node = ex.parse("0*y + 1*Dy - (2-2)*t + y^1 + t^0")
        self.assertEqual(ex.to_text(ex.fold(node)), "Dy + y + 1")

    def test_preserves_value(self):
        for text in ("2*3*y - 4/2*Dy", "-(-(t*2))", "(1+1)^3*ya + 0/yb", "exp(0)*y"):
            with self.subTest(text=text):
                node = ex.parse(text)
                self.assertAlmostEqual(ex.evaluate(ex.fold(node), POINT), ex.evaluate(node, POINT))

    def test_keeps_division_by_zero(self):
        folded = ex.fold(ex.parse("1/0*y"))
        with self.assertRaises(EvalError):
            ex.evaluate(folded, POINT)


if __name__ == "__main__":
    unittest.main()
