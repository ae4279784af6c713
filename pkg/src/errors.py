"""
Exception hierarchy for hahnvar.

Library code raises these; the command line front end maps them to exit codes.
"""

from __future__ import annotations

from typing import Optional


class HahnError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(HahnError, ValueError):
    """Invalid (q, omega), interval, depth or option value."""


class FixedPointError(HahnError, ArithmeticError):
    """The Hahn quotient denominator vanished at a point not flagged as omega0."""


class OrbitRangeError(HahnError, OverflowError):
    """An inverse orbit step left the representable range."""


class NonConvergenceError(HahnError):
    """A series, product or iterative solve did not meet its stopping rule.

    Attributes:
        terms: Number of terms or iterations used before giving up.
        estimate: Last partial value, when one exists.
    """

    def __init__(self, message: str, terms: int = 0, estimate: Optional[float] = None):
        super().__init__(message)
        self.terms = terms
        self.estimate = estimate


class ParseError(HahnError, ValueError):
    """Malformed expression text.

    Attributes:
        position: Offset of the offending character in the input.
        expected: Short summary of what the parser wanted there.
    """

    def __init__(self, message: str, position: int, expected: str = ""):
        self.message = message
        self.position = position
        self.expected = expected
        detail = f" (expected {expected})" if expected else ""
        super().__init__(f"{message} at position {position}{detail}")


class EvalError(HahnError, ArithmeticError):
    """Unbound name or domain violation while evaluating an expression."""

    def __init__(self, message: str, node=None):
        super().__init__(message)
        self.node = node


class DiffError(HahnError):
    """Symbolic differentiation through a non-differentiable primitive."""


class LatticeMismatchError(HahnError, ValueError):
    """Grid values do not fit the lattice they are used with."""


class UsageError(HahnError):
    """An operation was requested in a situation it does not apply to."""


class ValidityWindowError(HahnError, ValueError):
    """Lattice points fall outside the window where a reduced recurrence holds."""


class ProblemFileError(HahnError, ValueError):
    """Problem file could not be turned into a variational problem."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
