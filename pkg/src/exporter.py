"""
Report export module for hahnvar.
Provides JSON reports for solves, checks and sweeps, and CSV grid dumps.
"""

import csv
import hashlib
import json
import logging
import math
import os
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from src import __version__
from src import expr as ex
from src.hahn_core import GridFunction, grid_derivative
from src.varcalc import ConvexityVerdict, SolveReport, VariationalProblem

logger = logging.getLogger(__name__)

CSV_HEADER = ['t', 'y', 'Dy', 'orbit', 'k']


def input_hash(*parts: str) -> str:
    """sha256 over the problem source and the flags that shaped the run."""
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode('utf-8'))
        digest.update(b'\0')
    return digest.hexdigest()


class ReportExporter:
    """Turns library results into schema-stable documents and writes them out."""

    def __init__(self, float_digits: int = 17, defaults: Optional[Dict[str, Any]] = None):
        """Initialize exporter.

        Args:
            float_digits: Significant digits kept for every float.
            defaults: Solver defaults copied into each report's export_info.
        """
        self.float_digits = float_digits
        self.defaults = dict(defaults or {})

    # -- value conversion -------------------------------------------------

    def number(self, value) -> Optional[float]:
        if value is None:
            return None
        value = float(value)
        if not math.isfinite(value):
            return None
        if self.float_digits >= 17:
            return value
        return float(format(value, f'.{self.float_digits}g'))

    def numbers(self, values: Iterable) -> List[Optional[float]]:
        return [self.number(v) for v in np.asarray(values, dtype=float).ravel()]

    # -- document builders ------------------------------------------------

    def export_info(self, source_hash: str, depth: Optional[int] = None,
                    tail_estimate: Optional[float] = None) -> Dict[str, Any]:
        return {
            'tool': 'hahnvar',
            'version': __version__,
            'input_sha256': source_hash,
            'depth': depth,
            'tail_estimate': self.number(tail_estimate),
            'defaults': self.defaults,
        }

    def problem_dict(self, problem: VariationalProblem) -> Dict[str, Any]:
        params = problem.params
        constraint = None
        if problem.constraint is not None:
            constraint = {
                'expr': ex.to_text(problem.constraint.expr),
                'gamma': self.number(problem.constraint.gamma),
            }
        return {
            'name': problem.name,
            'q': self.number(params.q),
            'omega': self.number(params.omega),
            'omega0': self.number(params.omega0),
            'a': self.number(problem.a),
            'b': self.number(problem.b),
            'lagrangian': ex.to_text(problem.lagrangian),
            'parameters': {k: self.number(v) for k, v in sorted(problem.parameters.items())},
            'boundary': {'a': str(problem.boundary.at_a), 'b': str(problem.boundary.at_b)},
            'constraint': constraint,
            'sense': problem.sense,
        }

    def grid_dict(self, gf: GridFunction) -> Dict[str, Any]:
        return {
            'omega0': {'t': self.number(gf.lattice.omega0), 'y': self.number(gf.value_omega0)},
            'a': {'t': self.numbers(gf.lattice.orbit_a.points), 'y': self.numbers(gf.values_a)},
            'b': {'t': self.numbers(gf.lattice.orbit_b.points), 'y': self.numbers(gf.values_b)},
        }

    def convexity_dict(self, verdict: Optional[ConvexityVerdict],
                       sense: str = 'min') -> Optional[Dict[str, Any]]:
        if verdict is None:
            return None
        return {
            'verdict': verdict.kind,
            'samples': verdict.samples,
            'witness': verdict.witness,
            'sufficiency': verdict.sufficiency(sense),
            'note': 'sampling evidence, not a proof',
        }

    def residual_dict(self, residuals) -> Dict[str, Any]:
        return {
            'max_abs': self.number(residuals.max_abs()),
            'a': self.numbers(residuals.a),
            'b': self.numbers(residuals.b),
        }

    def solve_document(self, problem: VariationalProblem, report: SolveReport,
                       source_hash: str) -> Dict[str, Any]:
        return {
            'export_info': self.export_info(source_hash, report.depth, report.tail_estimate),
            'problem': self.problem_dict(problem),
            'result': {
                'converged': report.converged,
                'message': report.message,
                'iterations': report.iterations,
                'gradient_norm': self.number(report.gradient_norm),
                'fallback_steps': report.fallback_steps,
                'functional_value': self.number(report.functional_value),
                'multiplier': self.number(report.multiplier),
                'lambda0': report.lambda0,
                'constraint_value': self.number(report.constraint_value),
                'nbc_a': self.number(report.nbc_a),
                'nbc_b': self.number(report.nbc_b),
                'el_residuals': self.residual_dict(report.el_residuals),
                'convexity': self.convexity_dict(report.convexity, report.sense),
            },
            'grid': self.grid_dict(report.minimizer),
        }

    def check_document(self, problem: VariationalProblem, candidate: GridFunction,
                       source_hash: str, functional: float, residuals,
                       nbc_a: Optional[float], nbc_b: Optional[float],
                       verdict: ConvexityVerdict, tail_estimate: float) -> Dict[str, Any]:
        return {
            'export_info': self.export_info(source_hash, candidate.lattice.depth, tail_estimate),
            'problem': self.problem_dict(problem),
            'check': {
                'functional_value': self.number(functional),
                'nbc_a': self.number(nbc_a),
                'nbc_b': self.number(nbc_b),
                'el_residuals': self.residual_dict(residuals),
                'convexity': self.convexity_dict(verdict, problem.sense),
            },
        }

    def sweep_document(self, problem: VariationalProblem, records: List[Dict[str, Any]],
                       source_hash: str, depth: int) -> Dict[str, Any]:
        return {
            'export_info': self.export_info(source_hash, depth),
            'problem': self.problem_dict(problem),
            'records': records,
        }

    # -- writers ----------------------------------------------------------

    @staticmethod
    def to_json_text(data: Dict[str, Any]) -> str:
        return json.dumps(data, indent=2, allow_nan=False) + '\n'

    def export_json(self, filepath: str, data: Dict[str, Any]) -> bool:
        """Write a report document to a JSON file.

        Returns:
            True if successful, False otherwise
        """
        try:
            directory = os.path.dirname(os.path.abspath(filepath))
            os.makedirs(directory, exist_ok=True)
            with open(filepath, 'w', encoding='utf-8', newline='\n') as f:
                f.write(self.to_json_text(data))
            return True
        except Exception as e:
            logger.error("Export error: %s", e)
            return False

    def export_grid_csv(self, filepath: str, gf: GridFunction) -> bool:
        """Write one row per lattice point: t, y, Dy, orbit, k.

        Dy is empty at the deepest stored point of each orbit and at omega0.

        Returns:
            True if successful, False otherwise
        """
        try:
            with open(filepath, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(CSV_HEADER)
                depth = gf.lattice.depth
                for row in gf.rows():
                    slope = ''
                    if row.k < depth and not _on_omega0(gf, row.orbit):
                        slope = repr(self.number(grid_derivative(gf, row.orbit, row.k)))
                    writer.writerow([repr(self.number(row.t)), repr(self.number(row.y)),
                                     slope, row.orbit, row.k])
                writer.writerow([repr(self.number(gf.lattice.omega0)),
                                 repr(self.number(gf.value_omega0)), '', 'omega0', ''])
            return True
        except Exception as e:
            logger.error("Export error: %s", e)
            return False


def _on_omega0(gf: GridFunction, orbit: str) -> bool:
    points = gf.lattice.orbit(orbit).points
    return points[0] == points[-1]
