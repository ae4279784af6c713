"""
Expression language for Lagrangians L(t, y, Dy, ya, yb).

Parsing, printing, evaluation (scalar or numpy-vectorised), symbolic partial
differentiation and constant folding. Nodes are immutable; differentiation
and folding are written as singledispatch functions over the node classes.
"""

from __future__ import annotations

import math
import re
from functools import singledispatch
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from src.errors import DiffError, EvalError, ParseError

VARIABLES = ('t', 'y', 'Dy', 'ya', 'yb')
FUNCTIONS = ('sin', 'cos', 'exp', 'log', 'sqrt', 'abs')

Value = Union[float, np.ndarray]

# Precedence levels used for printing.
PREC_ADD = 1
PREC_MUL = 2
PREC_NEG = 3
PREC_POW = 4
PREC_ATOM = 5


class Expression:
    """Base node. Subclasses set ``operands`` and, for leaves, ``value``."""

    precedence = PREC_ATOM
    operands: tuple = ()
    value = None

    def __eq__(self, other):
        return (type(self) is type(other)
                and self.value == other.value
                and self.operands == other.operands)

    def __hash__(self):
        return hash((type(self).__name__, self.value, self.operands))

    def __repr__(self):
        inner = ', '.join(repr(x) for x in ((self.value,) if self.value is not None else self.operands))
        return f"{type(self).__name__}({inner})"

    def __setattr__(self, name, value):
        if getattr(self, '_frozen', False):
            raise AttributeError(f"{type(self).__name__} nodes are immutable")
        super().__setattr__(name, value)

    def _freeze(self):
        object.__setattr__(self, '_frozen', True)


class Number(Expression):
    def __init__(self, value: float):
        self.value = float(value)
        self._freeze()

    @property
    def precedence(self):
        return PREC_NEG if self.value < 0 else PREC_ATOM

    def __str__(self):
        v = self.value
        if v.is_integer() and abs(v) < 1e16:
            return str(int(v))
        return repr(v)


class Variable(Expression):
    def __init__(self, name: str):
        self.value = name
        self._freeze()

    def __str__(self):
        return self.value


class Parameter(Expression):
    def __init__(self, name: str):
        self.value = name
        self._freeze()

    def __str__(self):
        return self.value


class Neg(Expression):
    precedence = PREC_NEG

    def __init__(self, operand: Expression):
        self.operands = (operand,)
        self._freeze()

    def __str__(self):
        (operand,) = self.operands
        text = str(operand)
        if operand.precedence < PREC_NEG:
            text = f"({text})"
        return f"-{text}"


class Call(Expression):
    def __init__(self, func: str, arg: Expression):
        self.value = func
        self.operands = (arg,)
        self._freeze()

    def __str__(self):
        return f"{self.value}({self.operands[0]})"


class BinaryOp(Expression):
    symbol = '?'
    spaced = False

    def __init__(self, left: Expression, right: Expression):
        self.operands = (left, right)
        self._freeze()

    def _left_needs_parens(self, node: Expression) -> bool:
        return node.precedence < self.precedence

    def _right_needs_parens(self, node: Expression) -> bool:
        # left-associative: an equal-precedence right operand keeps its parens
        return node.precedence <= self.precedence

    def __str__(self):
        left, right = self.operands
        ltext, rtext = str(left), str(right)
        if self._left_needs_parens(left):
            ltext = f"({ltext})"
        if self._right_needs_parens(right):
            rtext = f"({rtext})"
        sep = f" {self.symbol} " if self.spaced else self.symbol
        return f"{ltext}{sep}{rtext}"


class Add(BinaryOp):
    precedence = PREC_ADD
    symbol = '+'
    spaced = True


class Sub(BinaryOp):
    precedence = PREC_ADD
    symbol = '-'
    spaced = True


class Mul(BinaryOp):
    precedence = PREC_MUL
    symbol = '*'


class Div(BinaryOp):
    precedence = PREC_MUL
    symbol = '/'


class Pow(BinaryOp):
    """Right-associative power; the base must print as an atom."""

    precedence = PREC_POW
    symbol = '^'

    def _left_needs_parens(self, node):
        return node.precedence < PREC_ATOM

    def _right_needs_parens(self, node):
        return node.precedence < PREC_NEG


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()])
""", re.VERBOSE)

_ATOM_START = "number, name, '(' or '-'"


class _Token:
    __slots__ = ('kind', 'text', 'pos')

    def __init__(self, kind: str, text: str, pos: int):
        self.kind, self.text, self.pos = kind, text, pos


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos, _ATOM_START)
        kind = match.lastgroup
        if kind != 'ws':
            tokens.append(_Token(kind, match.group(), pos))
        pos = match.end()
    tokens.append(_Token('end', '', len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, parameters: Iterable[str]):
        self.tokens = _tokenize(text)
        self.index = 0
        self.parameters = frozenset(parameters)

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def _advance(self) -> _Token:
        token = self.current
        self.index += 1
        return token

    def _expect(self, text: str):
        if self.current.text != text:
            raise ParseError(f"unexpected {self._describe(self.current)}",
                             self.current.pos, repr(text))
        self._advance()

    @staticmethod
    def _describe(token: _Token) -> str:
        return 'end of input' if token.kind == 'end' else repr(token.text)

    def parse(self) -> Expression:
        node = self.expr()
        if self.current.kind != 'end':
            raise ParseError(f"unexpected {self._describe(self.current)}",
                             self.current.pos, "operator or end of input")
        return node

    def expr(self) -> Expression:
        node = self.term()
        while self.current.text in ('+', '-') and self.current.kind == 'op':
            op = self._advance().text
            right = self.term()
            node = Add(node, right) if op == '+' else Sub(node, right)
        return node

    def term(self) -> Expression:
        node = self.factor()
        while self.current.text in ('*', '/') and self.current.kind == 'op':
            op = self._advance().text
            right = self.factor()
            node = Mul(node, right) if op == '*' else Div(node, right)
        return node

    def factor(self) -> Expression:
        if self.current.kind == 'op' and self.current.text == '-':
            self._advance()
            operand = self.factor()
            # a negated literal is stored as a negative number
            if isinstance(operand, Number):
                return Number(-operand.value)
            return Neg(operand)
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.current.kind == 'op' and self.current.text == '^':
            self._advance()
            return Pow(base, self.factor())
        return base

    def atom(self) -> Expression:
        token = self.current
        if token.kind == 'number':
            self._advance()
            return Number(float(token.text))
        if token.kind == 'ident':
            self._advance()
            name = token.text
            followed_by_paren = self.current.text == '('
            if name in FUNCTIONS:
                if not followed_by_paren:
                    raise ParseError(f"function {name!r} needs an argument",
                                     self.current.pos, "'('")
                self._advance()
                arg = self.expr()
                self._expect(')')
                return Call(name, arg)
            if followed_by_paren:
                raise ParseError(f"{name!r} is not a function", self.current.pos,
                                 f"one of {', '.join(FUNCTIONS)}")
            if name in VARIABLES:
                return Variable(name)
            if name in self.parameters:
                return Parameter(name)
            raise ParseError(f"unknown identifier {name!r}", token.pos,
                             "a variable, declared parameter or function")
        if token.kind == 'op' and token.text == '(':
            self._advance()
            node = self.expr()
            self._expect(')')
            return node
        raise ParseError(f"unexpected {self._describe(token)}", token.pos, _ATOM_START)


def parse(text: str, parameters: Iterable[str] = ()) -> Expression:
    """Parse expression text; parameters lists the names allowed besides the variables."""
    return _Parser(text, parameters).parse()


def to_text(node: Expression) -> str:
    return str(node)


# ---------------------------------------------------------------------------
# Inspection
# ---------------------------------------------------------------------------

def names(node: Expression) -> set[str]:
    """Variable and parameter names referenced by node."""
    found = set()
    stack = [node]
    while stack:
        current = stack.pop()
        if isinstance(current, (Variable, Parameter)):
            found.add(current.value)
        stack.extend(current.operands)
    return found


def depends_on(node: Expression, var: str) -> bool:
    return var in names(node)


def contains_call(node: Expression, func: str) -> bool:
    stack = [node]
    while stack:
        current = stack.pop()
        if isinstance(current, Call) and current.value == func:
            return True
        stack.extend(current.operands)
    return False


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_NUMPY_FUNCS = {
    'sin': np.sin,
    'cos': np.cos,
    'exp': np.exp,
    'log': np.log,
    'sqrt': np.sqrt,
    'abs': np.abs,
}


@singledispatch
def _evaluate(node: Expression, env: Mapping[str, Value]) -> Value:
    raise TypeError(f"cannot evaluate {type(node).__name__}")


@_evaluate.register
def _(node: Number, env):
    return node.value


@_evaluate.register(Variable)
@_evaluate.register(Parameter)
def _(node, env):
    try:
        return env[node.value]
    except KeyError:
        raise EvalError(f"unbound name {node.value!r}", node) from None


@_evaluate.register
def _(node: Neg, env):
    return -_evaluate(node.operands[0], env)


@_evaluate.register
def _(node: Add, env):
    return _evaluate(node.operands[0], env) + _evaluate(node.operands[1], env)


@_evaluate.register
def _(node: Sub, env):
    return _evaluate(node.operands[0], env) - _evaluate(node.operands[1], env)


@_evaluate.register
def _(node: Mul, env):
    return _evaluate(node.operands[0], env) * _evaluate(node.operands[1], env)


@_evaluate.register
def _(node: Div, env):
    num = _evaluate(node.operands[0], env)
    den = _evaluate(node.operands[1], env)
    if np.any(np.asarray(den) == 0.0):
        raise EvalError(f"division by zero in {node}", node)
    return num / den


@_evaluate.register
def _(node: Pow, env):
    base = np.asarray(_evaluate(node.operands[0], env), dtype=float)
    exponent = np.asarray(_evaluate(node.operands[1], env), dtype=float)
    integral = exponent == np.round(exponent)
    if np.any((base < 0.0) & ~integral):
        raise EvalError(f"negative base with fractional exponent in {node}", node)
    if np.any((base == 0.0) & (exponent < 0.0)):
        raise EvalError(f"zero raised to a negative power in {node}", node)
    result = np.power(base, exponent)
    return result if result.ndim else float(result)


@_evaluate.register
def _(node: Call, env):
    arg = _evaluate(node.operands[0], env)
    if node.value == 'log' and np.any(np.asarray(arg) <= 0.0):
        raise EvalError(f"log of a non-positive value in {node}", node)
    if node.value == 'sqrt' and np.any(np.asarray(arg) < 0.0):
        raise EvalError(f"sqrt of a negative value in {node}", node)
    result = _NUMPY_FUNCS[node.value](arg)
    return result if np.ndim(result) else float(result)


def evaluate(node: Expression, env: Mapping[str, Value]) -> Value:
    """Evaluate with scalars or broadcastable numpy arrays bound in env."""
    with np.errstate(all='ignore'):
        result = _evaluate(node, env)
    if not np.all(np.isfinite(result)):
        raise EvalError(f"non-finite value from {node}", node)
    return result


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

ZERO = Number(0.0)
ONE = Number(1.0)


@singledispatch
def _diff(node: Expression, var: str) -> Expression:
    raise TypeError(f"cannot differentiate {type(node).__name__}")


@_diff.register
def _(node: Number, var):
    return ZERO


@_diff.register
def _(node: Parameter, var):
    return ZERO


@_diff.register
def _(node: Variable, var):
    return ONE if node.value == var else ZERO


@_diff.register
def _(node: Neg, var):
    return Neg(_diff(node.operands[0], var))


@_diff.register
def _(node: Add, var):
    left, right = node.operands
    return Add(_diff(left, var), _diff(right, var))


@_diff.register
def _(node: Sub, var):
    left, right = node.operands
    return Sub(_diff(left, var), _diff(right, var))


@_diff.register
def _(node: Mul, var):
    left, right = node.operands
    return Add(Mul(_diff(left, var), right), Mul(left, _diff(right, var)))


@_diff.register
def _(node: Div, var):
    num, den = node.operands
    if not depends_on(den, var):
        return Div(_diff(num, var), den)
    numerator = Sub(Mul(_diff(num, var), den), Mul(num, _diff(den, var)))
    return Div(numerator, Pow(den, Number(2.0)))


@_diff.register
def _(node: Pow, var):
    base, exponent = node.operands
    if not depends_on(exponent, var):
        return Mul(Mul(exponent, Pow(base, Sub(exponent, ONE))), _diff(base, var))
    # d(u^v) = u^v * (v' log u + v u'/u)
    return Mul(node, Add(Mul(_diff(exponent, var), Call('log', base)),
                         Div(Mul(exponent, _diff(base, var)), base)))


@_diff.register
def _(node: Call, var):
    (arg,) = node.operands
    inner = _diff(arg, var)
    func = node.value
    if func == 'sin':
        return Mul(Call('cos', arg), inner)
    if func == 'cos':
        return Neg(Mul(Call('sin', arg), inner))
    if func == 'exp':
        return Mul(node, inner)
    if func == 'log':
        return Div(inner, arg)
    if func == 'sqrt':
        return Div(inner, Mul(Number(2.0), node))
    raise DiffError(f"cannot differentiate through {func}()")


def diff(node: Expression, var: str) -> Expression:
    """Symbolic partial derivative; other variables and parameters are constants."""
    if var not in VARIABLES:
        raise DiffError(f"can only differentiate with respect to {VARIABLES}, got {var!r}")
    if contains_call(node, 'abs'):
        raise DiffError("abs() is not differentiable; rewrite the expression without it")
    return _diff(node, var)


# ---------------------------------------------------------------------------
# Folding
# ---------------------------------------------------------------------------

def _number(node: Expression) -> Optional[float]:
    return node.value if isinstance(node, Number) else None


def _safe_number(node: Expression) -> Optional[Number]:
    try:
        value = evaluate(node, {})
    except EvalError:
        return None
    return Number(value)


def _product_parts(node: Expression) -> tuple[float, list[Expression]]:
    """Split a product chain into its numeric coefficient and other factors."""
    if isinstance(node, Number):
        return node.value, []
    if isinstance(node, Neg):
        coef, factors = _product_parts(node.operands[0])
        return -coef, factors
    if isinstance(node, Mul):
        lcoef, lfac = _product_parts(node.operands[0])
        rcoef, rfac = _product_parts(node.operands[1])
        return lcoef * rcoef, lfac + rfac
    if isinstance(node, Div):
        den = _number(node.operands[1])
        if den is not None and den != 0.0:
            coef, factors = _product_parts(node.operands[0])
            return coef / den, factors
    return 1.0, [node]


def _build_product(coef: float, factors: list[Expression]) -> Expression:
    if coef == 0.0:
        return ZERO
    if not factors:
        return Number(coef)
    rest = factors[0]
    for factor in factors[1:]:
        rest = Mul(rest, factor)
    if coef == 1.0:
        return rest
    if coef == -1.0:
        return Neg(rest)
    return Mul(Number(coef), rest)


@singledispatch
def _fold(node: Expression) -> Expression:
    return node


@_fold.register
def _(node: Neg):
    operand = _fold(node.operands[0])
    if isinstance(operand, Number):
        return Number(-operand.value)
    if isinstance(operand, Neg):
        return operand.operands[0]
    if isinstance(operand, Mul) and isinstance(operand.operands[0], Number):
        return _build_product(-operand.operands[0].value, [operand.operands[1]])
    return Neg(operand)


@_fold.register
def _(node: Add):
    left, right = (_fold(x) for x in node.operands)
    if _number(left) is not None and _number(right) is not None:
        return Number(left.value + right.value)
    if _number(left) == 0.0:
        return right
    if _number(right) == 0.0:
        return left
    return Add(left, right)


@_fold.register
def _(node: Sub):
    left, right = (_fold(x) for x in node.operands)
    if _number(left) is not None and _number(right) is not None:
        return Number(left.value - right.value)
    if _number(right) == 0.0:
        return left
    if _number(left) == 0.0:
        return _fold(Neg(right))
    return Sub(left, right)


def _fold_product(node: BinaryOp) -> Expression:
    left, right = (_fold(x) for x in node.operands)
    rebuilt = type(node)(left, right)
    if isinstance(node, Div) and _number(right) == 0.0:
        return rebuilt
    if isinstance(node, Div) and _number(right) is None:
        return ZERO if _number(left) == 0.0 else rebuilt
    coef, factors = _product_parts(rebuilt)
    if not math.isfinite(coef):
        return rebuilt
    return _build_product(coef, factors)


_fold.register(Mul, _fold_product)
_fold.register(Div, _fold_product)


@_fold.register
def _(node: Pow):
    base, exponent = (_fold(x) for x in node.operands)
    if _number(exponent) == 1.0:
        return base
    if _number(exponent) == 0.0:
        return ONE
    if _number(base) == 1.0:
        return ONE
    folded = Pow(base, exponent)
    if _number(base) is not None and _number(exponent) is not None:
        return _safe_number(folded) or folded
    return folded


@_fold.register
def _(node: Call):
    arg = _fold(node.operands[0])
    folded = Call(node.value, arg)
    if isinstance(arg, Number):
        return _safe_number(folded) or folded
    return folded


def fold(node: Expression) -> Expression:
    """Fold constant subtrees and 0/1 identities; evaluation is preserved."""
    return _fold(node)


def derivative(node: Expression, var: str) -> Expression:
    """diff followed by fold."""
    return fold(diff(node, var))
