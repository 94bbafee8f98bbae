"""MILP backend adapters.

The bundled adapter drives CBC through PuLP. Backends are looked up by name;
``RAILPLAN_SOLVER`` selects the default.
"""

from __future__ import annotations

import logging
import math
import os
import re
import tempfile
import time
from pathlib import Path

import pulp

from .errors import BackendError
from .milp import Constraint, ModelSpec, Sense, SolveResult, SolveStatus, SolverOptions, Variable

logger = logging.getLogger(__name__)

SOLVER_ENV = "RAILPLAN_SOLVER"
DEFAULT_BACKEND = "cbc"

_SENSES = {
    Sense.LE: pulp.LpConstraintLE,
    Sense.EQ: pulp.LpConstraintEQ,
    Sense.GE: pulp.LpConstraintGE,
}
_FROM_PULP_SENSE = {value: key for key, value in _SENSES.items()}

_GAP_LINE = re.compile(r"^Gap:\s+(-?[0-9.eE+-]+)", re.MULTILINE)
_BOUND_LINE = re.compile(r"^Lower bound:\s+(-?[0-9.eE+-]+)", re.MULTILINE)


def _bound(value: float | None) -> float | None:
    if value is None or math.isinf(value):
        return None
    return value


def to_pulp(model: ModelSpec, relax_all: bool = False) -> tuple[pulp.LpProblem, dict[str, pulp.LpVariable]]:
    """Translate a model into a PuLP problem. Rows with no terms are left out."""
    problem = pulp.LpProblem(model.name or "model", pulp.LpMinimize)
    columns = {}
    for var in model.variables:
        category = pulp.LpInteger if var.integer and not relax_all else pulp.LpContinuous
        columns[var.id] = pulp.LpVariable(var.id, lowBound=_bound(var.lower), upBound=_bound(var.upper), cat=category)
    problem += pulp.lpSum(var.cost * columns[var.id] for var in model.variables if var.cost)
    for row in model.constraints:
        if not row.terms:
            continue
        expression = pulp.lpSum(coef * columns[name] for name, coef in row.terms)
        problem += pulp.LpConstraint(expression, sense=_SENSES[row.sense], rhs=row.rhs, name=row.id)
    return problem, columns


def export_lp(model: ModelSpec, path: str | Path) -> Path:
    problem, _ = to_pulp(model)
    problem.writeLP(str(path))
    return Path(path)


def export_mps(model: ModelSpec, path: str | Path) -> Path:
    problem, _ = to_pulp(model)
    problem.writeMPS(str(path))
    return Path(path)


def import_mps(path: str | Path) -> ModelSpec:
    _, problem = pulp.LpProblem.fromMPS(str(path), sense=pulp.LpMinimize)
    objective = problem.objective or pulp.LpAffineExpression()
    variables = tuple(
        Variable(
            id=column.name,
            lower=-math.inf if column.lowBound is None else float(column.lowBound),
            upper=None if column.upBound is None else float(column.upBound),
            integer=column.cat == pulp.LpInteger,
            cost=float(objective.get(column, 0.0)),
        )
        for column in problem.variables()
    )
    constraints = tuple(
        Constraint(
            id=name,
            terms=tuple((column.name, float(coef)) for column, coef in row.items()),
            sense=_FROM_PULP_SENSE[row.sense],
            rhs=-float(row.constant),
        )
        for name, row in problem.constraints.items()
    )
    return ModelSpec(problem.name, variables, constraints)


def parse_cbc_log(text: str) -> tuple[float | None, float | None]:
    """Return (gap, lower bound) from a CBC log, either may be None."""
    gap = _GAP_LINE.findall(text)
    bound = _BOUND_LINE.findall(text)
    return (float(gap[-1]) if gap else None, float(bound[-1]) if bound else None)


class PulpCbcBackend:
    name = "cbc"
    reentrant = True

    def available(self) -> bool:
        return bool(pulp.PULP_CBC_CMD(msg=False).available())

    def _trivial(self, model: ModelSpec, options: SolverOptions) -> SolveResult | None:
        for row in model.constraints:
            if not row.terms and row.violation({}) > options.feasibility_tolerance:
                return SolveResult(SolveStatus.INFEASIBLE, message=f"empty row {row.id} cannot hold")
        if model.variables:
            return None
        return SolveResult(SolveStatus.OPTIMAL, objective=0.0, gap=0.0, best_bound=0.0, values={})

    def solve(self, model: ModelSpec, options: SolverOptions) -> SolveResult:
        started = time.perf_counter()
        trivial = self._trivial(model, options)
        if trivial is not None:
            return trivial
        problem, columns = to_pulp(model, relax_all=options.relax_all)
        warm = bool(options.warm_start)
        if warm:
            for name, value in options.warm_start.items():
                if name in columns:
                    columns[name].setInitialValue(value)
        with tempfile.TemporaryDirectory(prefix="railplan-cbc-") as workdir:
            log_path = Path(workdir) / "cbc.log"
            solver = pulp.PULP_CBC_CMD(
                msg=False,
                timeLimit=options.time_limit,
                gapRel=options.gap_target,
                threads=options.threads,
                warmStart=warm,
                logPath=str(log_path),
                options=[f"integerT {options.integrality_tolerance}", f"primalT {options.feasibility_tolerance}"],
            )
            try:
                problem.solve(solver)
            except pulp.PulpSolverError as exc:
                logger.error("CBC failed on %s: %s", model.name, exc)
                return SolveResult(SolveStatus.ERROR, message=str(exc), wall_time=time.perf_counter() - started)
            log_text = log_path.read_text() if log_path.exists() else ""
        elapsed = time.perf_counter() - started
        status = {
            pulp.LpSolutionOptimal: SolveStatus.OPTIMAL,
            pulp.LpSolutionIntegerFeasible: SolveStatus.FEASIBLE_AT_LIMIT,
            pulp.LpSolutionInfeasible: SolveStatus.INFEASIBLE,
            pulp.LpSolutionUnbounded: SolveStatus.UNBOUNDED,
        }.get(problem.sol_status, SolveStatus.ERROR)
        if status not in (SolveStatus.OPTIMAL, SolveStatus.FEASIBLE_AT_LIMIT):
            message = f"CBC returned {pulp.LpStatus.get(problem.status, 'Undefined')}"
            logger.info("Solve %s: %s in %.2fs", model.name, status.value, elapsed)
            return SolveResult(status, wall_time=elapsed, message=message)
        values = {name: float(column.varValue or 0.0) for name, column in columns.items()}
        objective = model.objective(values)
        gap, bound = parse_cbc_log(log_text)
        if status is SolveStatus.OPTIMAL:
            gap = gap if gap is not None else 0.0
            bound = bound if bound is not None else objective
        elif gap is None and bound is not None:
            gap = max(0.0, objective - bound) / max(abs(objective), 1e-9)
        logger.info("Solve %s: %s objective=%.4f gap=%s in %.2fs", model.name, status.value, objective, gap, elapsed)
        return SolveResult(status, objective=objective, gap=gap, values=values, wall_time=elapsed, best_bound=bound)


BACKENDS = {"cbc": PulpCbcBackend}


def get_backend(name: str | None = None):
    name = name or os.environ.get(SOLVER_ENV, DEFAULT_BACKEND)
    try:
        return BACKENDS[name.lower()]()
    except KeyError:
        raise BackendError(f"unknown solver backend '{name}' (known: {', '.join(sorted(BACKENDS))})") from None
