"""
Problem file and candidate grid readers.

A problem file is a small sectioned key = value document::

    [hahn]
    q = 0.99
    omega = 0.02
    [interval]
    a = 0
    b = 1
    [lagrangian]
    expr = y + (1/2)*Dy^2
    [boundary]
    a = free
    b = fixed:1

Optional sections are [params], [constraint] (expr, gamma) and [solver]
(depth, tol, max_iter, sense). Lines starting with '#' or ';' are comments.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from src import expr as ex
from src.errors import LatticeMismatchError, ParseError, ParameterError, ProblemFileError
from src.hahn_core import GridFunction, HahnParams, Lattice
from src.varcalc import BoundarySpec, Constraint, EndCondition, VariationalProblem

logger = logging.getLogger(__name__)

SECTION_KEYS = {
    'hahn': {'q', 'omega'},
    'interval': {'a', 'b'},
    'lagrangian': {'expr'},
    'boundary': {'a', 'b'},
    'params': None,  # any parameter name
    'constraint': {'expr', 'gamma'},
    'solver': {'depth', 'tol', 'max_iter', 'sense'},
}
REQUIRED = (('hahn', 'q'), ('hahn', 'omega'), ('interval', 'a'), ('interval', 'b'),
            ('lagrangian', 'expr'))

_SECTION_RE = re.compile(r'^\[\s*([A-Za-z_]+)\s*\]$')
_NAME_RE = re.compile(r'^[A-Za-z_][A-Za-z0-9_]*$')


@dataclass
class ProblemSource:
    problem: VariationalProblem
    solver: Dict[str, object] = field(default_factory=dict)
    text: str = ''


def _real(text: str, line: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ProblemFileError(f"{what} must be a real number, got {text!r}", line) from None
    if not math.isfinite(value):
        raise ProblemFileError(f"{what} must be finite, got {text!r}", line)
    return value


def _end_condition(text: str, line: int) -> EndCondition:
    text = text.strip()
    if text == 'free':
        return EndCondition.free()
    if text.startswith('fixed:'):
        return EndCondition.fixed(_real(text[len('fixed:'):].strip(), line, 'fixed value'))
    raise ProblemFileError(f"boundary must be 'free' or 'fixed:<value>', got {text!r}", line)


def _expression(text: str, line: int, parameters) -> ex.Expression:
    try:
        return ex.parse(text, parameters=parameters)
    except ParseError as e:
        raise ProblemFileError(f"expression error: {e}", line) from e


def parse_problem_text(text: str, name: str = 'file') -> ProblemSource:
    """Parse problem file contents into a VariationalProblem plus solver overrides."""
    values: Dict[str, Dict[str, tuple[str, int]]] = {}
    section: Optional[str] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped[0] in '#;':
            continue
        header = _SECTION_RE.match(stripped)
        if header:
            section = header.group(1)
            if section not in SECTION_KEYS:
                raise ProblemFileError(f"unknown section [{section}]", number)
            if section in values:
                raise ProblemFileError(f"section [{section}] appears twice", number)
            values[section] = {}
            continue
        if section is None:
            raise ProblemFileError("key outside of any section", number)
        if '=' not in stripped:
            raise ProblemFileError(f"expected 'key = value', got {stripped!r}", number)
        key, _, value = stripped.partition('=')
        key, value = key.strip(), value.strip()
        allowed = SECTION_KEYS[section]
        if allowed is None:
            if not _NAME_RE.match(key):
                raise ProblemFileError(f"invalid parameter name {key!r}", number)
        elif key not in allowed:
            raise ProblemFileError(f"unknown key {key!r} in [{section}]", number)
        if key in values[section]:
            raise ProblemFileError(f"key {key!r} repeated in [{section}]", number)
        values[section][key] = (value, number)

    for sec, key in REQUIRED:
        if key not in values.get(sec, {}):
            raise ProblemFileError(f"missing required key {key!r} in [{sec}]")

    def get(sec: str, key: str) -> tuple[str, int]:
        return values[sec][key]

    try:
        q_text, q_line = get('hahn', 'q')
        omega_text, omega_line = get('hahn', 'omega')
        q = _real(q_text, q_line, 'q')
        omega = _real(omega_text, omega_line, 'omega')
        try:
            params = HahnParams(q, omega)
        except ParameterError as e:
            raise ProblemFileError(str(e), q_line) from e

        a = _real(*get('interval', 'a'), 'a')
        b = _real(*get('interval', 'b'), 'b')

        parameters = {k: _real(v, line, f"parameter {k}")
                      for k, (v, line) in values.get('params', {}).items()}
        expr_text, expr_line = get('lagrangian', 'expr')
        lagrangian = _expression(expr_text, expr_line, parameters)

        boundary_values = values.get('boundary', {})
        boundary = BoundarySpec(
            _end_condition(*boundary_values['a']) if 'a' in boundary_values else EndCondition.free(),
            _end_condition(*boundary_values['b']) if 'b' in boundary_values else EndCondition.free(),
        )

        constraint = None
        if 'constraint' in values:
            block = values['constraint']
            if set(block) != {'expr', 'gamma'}:
                raise ProblemFileError("[constraint] needs both expr and gamma")
            constraint = Constraint(_expression(*block['expr'], parameters),
                                    _real(*block['gamma'], 'gamma'))

        solver: Dict[str, object] = {}
        for key, (value, line) in values.get('solver', {}).items():
            if key == 'sense':
                solver[key] = value
            elif key == 'tol':
                solver[key] = _real(value, line, key)
            else:
                try:
                    solver[key] = int(value)
                except ValueError:
                    raise ProblemFileError(f"{key} must be an integer, got {value!r}", line) from None

        problem = VariationalProblem(
            params=params, a=a, b=b, lagrangian=lagrangian, parameters=parameters,
            boundary=boundary, constraint=constraint,
            sense=str(solver.get('sense', 'min')), name=name,
        )
    except ParameterError as e:
        raise ProblemFileError(str(e)) from e
    logger.debug("parsed problem %s with %d parameters", name, len(parameters))
    return ProblemSource(problem, solver, text)


def load_problem_file(path: str) -> ProblemSource:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ProblemFileError(f"cannot read {path}: {e}") from e
    return parse_problem_text(text, name=path)


def read_grid_csv(path: str, lattice: Lattice, rtol: float = 1e-9) -> GridFunction:
    """Read a candidate written as t, y, Dy, orbit, k rows onto the given lattice.

    Every stored point of both orbits must be present with a matching t. The
    omega0 row is optional; without it the mean of the deepest values is used.
    """
    depth = lattice.depth
    values = {'a': np.full(depth + 1, np.nan), 'b': np.full(depth + 1, np.nan)}
    omega0_value = None
    try:
        with open(path, 'r', newline='', encoding='utf-8') as f:
            reader = csv.DictReader(f)
            missing = {'t', 'y', 'orbit', 'k'} - set(reader.fieldnames or ())
            if missing:
                raise LatticeMismatchError(f"candidate CSV lacks columns {sorted(missing)}")
            for row in reader:
                orbit = row['orbit'].strip()
                y = float(row['y'])
                if orbit == 'omega0':
                    omega0_value = y
                    continue
                if orbit not in values:
                    raise LatticeMismatchError(f"unknown orbit {orbit!r} in candidate")
                k = int(row['k'])
                if not 0 <= k <= depth:
                    raise LatticeMismatchError(
                        f"candidate index k={k} outside the lattice depth {depth}")
                expected = lattice.orbit(orbit).points[k]
                t = float(row['t'])
                if abs(t - expected) > rtol * max(1.0, abs(expected)):
                    raise LatticeMismatchError(
                        f"candidate point {orbit}[{k}] has t={t!r}, lattice has {expected!r}")
                values[orbit][k] = y
    except OSError as e:
        raise ProblemFileError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        if isinstance(e, LatticeMismatchError):
            raise
        raise LatticeMismatchError(f"malformed candidate CSV: {e}") from e

    for orbit, arr in values.items():
        if np.isnan(arr).any():
            raise LatticeMismatchError(
                f"candidate misses {int(np.isnan(arr).sum())} points of orbit {orbit} "
                f"at depth {depth}")
    if omega0_value is None:
        omega0_value = 0.5 * (values['a'][-1] + values['b'][-1])
    return GridFunction(lattice, values['a'], values['b'], omega0_value)
