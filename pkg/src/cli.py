"""
Command line front end.

    hahnvar solve example1 --q 0.99 --omega 0.02 --depth 60
    hahnvar check problem.txt --candidate grid.csv
    hahnvar sweep example2 --vary gamma,nu=1e2:1e6:3 --log-space
    hahnvar derive "t^2" --q 0.5 --omega 0.5 --t 2
    hahnvar integrate "1" --q 0.9 --omega 0.01 --a 0 --b 1
    hahnvar config set depth 80

Reports go to stdout (or --out) as JSON; diagnostics go to stderr.
Exit codes: 0 success, 1 input error, 2 non-convergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np

from src import expr as ex
from src.config import LOG_LEVELS, Config
from src.errors import HahnError, NonConvergenceError, ParameterError, UsageError
from src.exporter import ReportExporter, input_hash
from src.hahn_core import HahnParams, hahn_derivative_info
from src.jn_integral import integral_info
from src.models import CATALOG, catalog_problem
from src.problem_file import load_problem_file, read_grid_csv
from src.varcalc import (
    SolveOptions,
    VariationalProblem,
    convexity_probe,
    el_residual,
    functional_value,
    nbc_residual_a,
    nbc_residual_b,
    solve,
    tail_estimate,
    working_lattice,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGENCE = 2

CONVEXITY_SAMPLES = 2000


def _key_value(text: str) -> tuple[str, float]:
    name, sep, value = text.partition('=')
    if not sep or not name.strip():
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"value of {name.strip()} must be a number") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='hahnvar',
        description='Hahn quantum variational calculus: solve, audit and sweep problems.',
        epilog='Defaults: depth 60, tail_tol 1e-13, solver tol 1e-10, sense min '
               '(overridable in config.json).',
    )
    parser.add_argument('--config-dir', help='directory holding config.json')
    parser.add_argument('--log-level', choices=LOG_LEVELS, help='stderr log level')
    sub = parser.add_subparsers(dest='command', required=True)

    def problem_flags(p: argparse.ArgumentParser):
        p.add_argument('source', help=f"problem file or catalog name ({', '.join(CATALOG)})")
        p.add_argument('--q', type=float)
        p.add_argument('--omega', type=float)
        p.add_argument('--depth', type=int)
        p.add_argument('--tol', type=float)
        p.add_argument('--max-iter', type=int)
        p.add_argument('--sense', choices=('min', 'max'))
        p.add_argument('--param', type=_key_value, action='append', default=[],
                       metavar='NAME=VALUE', help='override a declared parameter (repeatable)')
        p.add_argument('--out', help='write the JSON report here instead of stdout')

    p_solve = sub.add_parser('solve', help='solve a problem')
    problem_flags(p_solve)
    p_solve.add_argument('--csv', help='also dump the grid as t,y,Dy,orbit,k rows')

    p_check = sub.add_parser('check', help='audit a candidate grid without solving')
    problem_flags(p_check)
    p_check.add_argument('--candidate', required=True, help='candidate grid CSV')
    p_check.add_argument('--seed', type=int, default=0, help='convexity probe seed')

    p_sweep = sub.add_parser('sweep', help='solve over a grid of parameter values')
    problem_flags(p_sweep)
    p_sweep.add_argument('--vary', action='append', required=True,
                         metavar='NAMES=START:STOP:COUNT',
                         help='comma-joined names varied jointly; values as start:stop:count '
                              'or a comma list (repeatable, combined as a product)')
    p_sweep.add_argument('--log-space', action='store_true', help='geometric ranges')
    p_sweep.add_argument('--workers', type=int, help='solver threads')

    p_derive = sub.add_parser('derive', help='Hahn derivative of an expression in t')
    p_derive.add_argument('expr')
    p_derive.add_argument('--q', type=float, required=True)
    p_derive.add_argument('--omega', type=float, required=True)
    p_derive.add_argument('--t', type=float, required=True)

    p_int = sub.add_parser('integrate', help='q,omega-integral of an expression in t')
    p_int.add_argument('expr')
    p_int.add_argument('--q', type=float, required=True)
    p_int.add_argument('--omega', type=float, required=True)
    p_int.add_argument('--a', type=float, required=True)
    p_int.add_argument('--b', type=float, required=True)

    p_config = sub.add_parser('config', help='show or change the stored defaults')
    p_config.add_argument('action', choices=('show', 'set'))
    p_config.add_argument('key', nargs='?')
    p_config.add_argument('value', nargs='?', help='JSON value; null clears optional keys')
    return parser


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class _Source:
    problem: VariationalProblem
    solver: Dict[str, object]
    text: str
    closed_form: Optional[object] = None


def _override(problem: VariationalProblem, q, omega, params: Dict[str, float]) -> VariationalProblem:
    unknown = set(params) - set(problem.parameters)
    if unknown:
        raise ParameterError(f"--param names not declared by the problem: {sorted(unknown)}")
    hahn = problem.params
    if q is not None or omega is not None:
        hahn = HahnParams(hahn.q if q is None else q, hahn.omega if omega is None else omega)
    merged = dict(problem.parameters)
    merged.update(params)
    return dataclasses.replace(problem, params=hahn, parameters=merged)


def _load_source(source: str, q=None, omega=None, params=None) -> _Source:
    params = dict(params or {})
    if source in CATALOG:
        problem, closed_form = catalog_problem(source, q, omega, params)
        text = f"catalog:{source}"
        return _Source(problem, {}, text, closed_form)
    loaded = load_problem_file(source)
    return _Source(_override(loaded.problem, q, omega, params), loaded.solver, loaded.text)


def _options(config: Config, solver: Dict[str, object], args) -> SolveOptions:
    values = {key: solver[key] for key in ('depth', 'tol', 'max_iter') if key in solver}
    for key in ('depth', 'tol', 'max_iter'):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return config.solver_options(**values)


def _fingerprint(args, text: str) -> str:
    flags = {k: v for k, v in sorted(vars(args).items())
             if k not in ('out', 'csv', 'log_level', 'config_dir', 'workers')}
    return input_hash(text, repr(flags))


def _with_sense(problem: VariationalProblem, args, config: Config) -> VariationalProblem:
    sense = args.sense or (problem.sense if problem.sense != 'min' else config.sense)
    return dataclasses.replace(problem, sense=sense)


def _emit(exporter: ReportExporter, document: dict, out: Optional[str]) -> int:
    if out:
        if not exporter.export_json(out, document):
            return EXIT_INPUT
        return EXIT_OK
    sys.stdout.write(exporter.to_json_text(document))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_solve(args, config: Config, exporter: ReportExporter) -> int:
    source = _load_source(args.source, args.q, args.omega, dict(args.param))
    problem = _with_sense(source.problem, args, config)
    opts = _options(config, source.solver, args)
    report = solve(problem, opts=opts)
    report.convexity = convexity_probe(problem, CONVEXITY_SAMPLES, seed=opts.seed)
    document = exporter.solve_document(problem, report, _fingerprint(args, source.text))
    if args.csv and not exporter.export_grid_csv(args.csv, report.minimizer):
        return EXIT_INPUT
    status = _emit(exporter, document, args.out)
    if status != EXIT_OK:
        return status
    if not report.converged:
        logger.error("solve did not converge: %s", report.message)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_check(args, config: Config, exporter: ReportExporter) -> int:
    source = _load_source(args.source, args.q, args.omega, dict(args.param))
    problem = _with_sense(source.problem, args, config)
    opts = _options(config, source.solver, args)
    lattice = working_lattice(problem.params, problem.a, problem.b, opts.depth,
                              opts.min_step_scale)
    candidate = read_grid_csv(args.candidate, lattice)
    spec = opts.quadrature
    residuals = el_residual(problem, candidate, spec)
    nbc_a = nbc_residual_a(problem, candidate, spec) if problem.boundary.at_a.is_free else None
    nbc_b = nbc_residual_b(problem, candidate, spec) if problem.boundary.at_b.is_free else None
    verdict = convexity_probe(problem, CONVEXITY_SAMPLES, seed=args.seed)
    document = exporter.check_document(
        problem, candidate, _fingerprint(args, source.text),
        functional_value(problem, candidate, spec), residuals, nbc_a, nbc_b, verdict,
        tail_estimate(problem, candidate, spec))
    return _emit(exporter, document, args.out)


def parse_vary(text: str, log_space: bool = False) -> tuple[List[str], np.ndarray]:
    """'gamma,nu=1e2:1e6:3' -> (['gamma', 'nu'], values)."""
    names_text, sep, values_text = text.partition('=')
    names = [n.strip() for n in names_text.split(',') if n.strip()]
    if not sep or not names:
        raise UsageError(f"--vary expects names=start:stop:count, got {text!r}")
    try:
        if ':' in values_text:
            start, stop, count = values_text.split(':')
            count = int(count)
            if count < 1:
                raise UsageError(f"--vary {text!r} gives an empty range")
            if log_space:
                values = np.geomspace(float(start), float(stop), count)
            else:
                values = np.linspace(float(start), float(stop), count)
        else:
            values = np.array([float(v) for v in values_text.split(',') if v.strip()])
    except ValueError as e:
        raise UsageError(f"cannot read --vary {text!r}: {e}") from None
    if values.size == 0:
        raise UsageError(f"--vary {text!r} gives an empty range")
    return names, values


def _sweep_points(specs: Sequence[tuple[List[str], np.ndarray]]) -> List[Dict[str, float]]:
    points = []
    for combo in itertools.product(*(values for _, values in specs)):
        point = {}
        for (names, _), value in zip(specs, combo):
            for name in names:
                point[name] = float(value)
        points.append(point)
    return points


def cmd_sweep(args, config: Config, exporter: ReportExporter) -> int:
    specs = [parse_vary(text, args.log_space) for text in args.vary]
    base = _load_source(args.source, args.q, args.omega, dict(args.param))
    declared = set(base.problem.parameters) | {'q', 'omega'}
    for names, _ in specs:
        unknown = set(names) - declared
        if unknown:
            raise UsageError(f"cannot vary undeclared names {sorted(unknown)}")
    opts = _options(config, base.solver, args)
    fixed = dict(args.param)

    def run(point: Dict[str, float]) -> dict:
        record = {'values': {k: exporter.number(v) for k, v in point.items()}, 'error': None}
        try:
            q = point.get('q', args.q)
            omega = point.get('omega', args.omega)
            overrides = dict(fixed)
            overrides.update({k: v for k, v in point.items() if k not in ('q', 'omega')})
            source = _load_source(args.source, q, omega, overrides)
            problem = _with_sense(source.problem, args, config)
            report = solve(problem, opts=opts)
        except HahnError as e:
            record.update(converged=False, error=str(e))
            return record
        gf = report.minimizer
        record.update(
            converged=report.converged,
            functional_value=exporter.number(report.functional_value),
            y_a=exporter.number(gf.values_a[0]),
            y_b=exporter.number(gf.values_b[0]),
            el_residual_max=exporter.number(report.el_residuals.max_abs()),
            nbc_a=exporter.number(report.nbc_a),
            nbc_b=exporter.number(report.nbc_b),
            gradient_norm=exporter.number(report.gradient_norm),
            multiplier=exporter.number(report.multiplier),
            depth=report.depth,
        )
        if not report.converged:
            record['error'] = report.message
        return record

    points = _sweep_points(specs)
    workers = args.workers or config.sweep_workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, points))
    else:
        records = [run(point) for point in points]

    document = exporter.sweep_document(base.problem, records, _fingerprint(args, base.text),
                                       opts.depth)
    status = _emit(exporter, document, args.out)
    if status != EXIT_OK:
        return status
    failed = sum(1 for r in records if not r['converged'])
    if failed:
        logger.error("%d of %d sweep points failed", failed, len(records))
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _function_of_t(text: str):
    node = ex.parse(text)
    extra = ex.names(node) - {'t'}
    if extra:
        raise UsageError(f"expression may only use t, found {sorted(extra)}")

    def f(t: float) -> float:
        return float(ex.evaluate(node, {'t': t}))

    return f


def cmd_derive(args, config: Config, exporter: ReportExporter) -> int:
    f = _function_of_t(args.expr)
    params = HahnParams(args.q, args.omega)
    value, approximate = hahn_derivative_info(f, params, args.t, config.fixed_point_step)
    sys.stdout.write(exporter.to_json_text({
        't': exporter.number(args.t),
        'derivative': exporter.number(value),
        'approximate': approximate,
    }))
    return EXIT_OK


def cmd_integrate(args, config: Config, exporter: ReportExporter) -> int:
    f = _function_of_t(args.expr)
    params = HahnParams(args.q, args.omega)
    result = integral_info(f, params, args.a, args.b, config.quadrature_spec())
    sys.stdout.write(exporter.to_json_text({
        'a': exporter.number(args.a),
        'b': exporter.number(args.b),
        'integral': exporter.number(result.value),
        'terms': result.terms,
        'tail_estimate': exporter.number(result.tail_estimate),
    }))
    return EXIT_OK


def cmd_config(args, config: Config, exporter: ReportExporter) -> int:
    if args.action == 'set':
        if args.key is None or args.value is None:
            raise UsageError("config set needs KEY VALUE")
        try:
            saved = config.update(args.key, args.value)
        except ValueError as e:
            raise UsageError(str(e)) from None
        if not saved:
            logger.error("could not write %s", config.config_path)
            return EXIT_INPUT
    sys.stdout.write(exporter.to_json_text(config.as_dict()))
    return EXIT_OK


COMMANDS = {
    'solve': cmd_solve,
    'check': cmd_check,
    'sweep': cmd_sweep,
    'derive': cmd_derive,
    'integrate': cmd_integrate,
    'config': cmd_config,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    config = Config(args.config_dir)
    logging.basicConfig(stream=sys.stderr, level=args.log_level or config.log_level,
                        format='%(levelname)s %(name)s: %(message)s')
    exporter = ReportExporter(config.float_digits, config.provenance())
    try:
        return COMMANDS[args.command](args, config, exporter)
    except NonConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except HahnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
