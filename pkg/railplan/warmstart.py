"""Relax-and-fix warm start and the exact solve that consumes it.

Columns are split into the extra-train selectors, two ordered groups
(block design with loaded cars, then empty-car fleet columns) and a tail of
container flows and loading patterns. Each stage fixes to zero whatever the
previous solution left below epsilon and restores integrality on the rest;
nothing is ever rounded up.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping

from .backends import get_backend
from .formulations import BuiltModel
from .instance import PlanningConfig
from .milp import (
    ModelSpec,
    SolveResult,
    SolveStatus,
    SolverOptions,
    VarKind,
    WarmStartSummary,
    fix_variables,
    relax,
    set_integrality,
)

logger = logging.getLogger(__name__)

GROUP_KINDS: dict[str, tuple[VarKind, ...]] = {
    "design": (VarKind.BLOCK, VarKind.LOADED_CARS),
    "fleet": (VarKind.EMPTY_CARS, VarKind.ALLOCATION, VarKind.POOL),
}
DEFAULT_GROUP_ORDER = ("design", "fleet")
TAIL_KINDS = (VarKind.FLOW, VarKind.UNMET, VarKind.SINGLE_LOAD, VarKind.PAIR_LOAD)


@dataclass(frozen=True)
class VariablePartition:
    extra: tuple[str, ...]
    groups: tuple[tuple[str, tuple[str, ...]], ...]
    tail: tuple[str, ...]

    @classmethod
    def from_built(cls, built: BuiltModel, group_order: tuple[str, ...] = DEFAULT_GROUP_ORDER) -> "VariablePartition":
        if sorted(group_order) != sorted(GROUP_KINDS):
            raise ValueError(f"group order must be a permutation of {sorted(GROUP_KINDS)}")
        registry = built.registry
        return cls(
            extra=registry.ids_of(VarKind.EXTRA),
            groups=tuple((name, registry.ids_of(*GROUP_KINDS[name])) for name in group_order),
            tail=registry.ids_of(*TAIL_KINDS),
        )

    def members(self) -> list[str]:
        ids = list(self.extra)
        for _, group in self.groups:
            ids.extend(group)
        ids.extend(self.tail)
        return ids

    def is_partition_of(self, model: ModelSpec) -> bool:
        ids = self.members()
        return len(ids) == len(set(ids)) and set(ids) == {var.id for var in model.variables}


@dataclass(frozen=True)
class WarmStartConfig:
    epsilon: float = 1e-5
    gap_target: float = 0.025
    time_limit: float | None = None
    threads: int = 1
    group_order: tuple[str, ...] = DEFAULT_GROUP_ORDER

    @classmethod
    def from_planning(cls, config: PlanningConfig, **overrides) -> "WarmStartConfig":
        values = dict(
            epsilon=config.warm_start_epsilon,
            gap_target=config.mip_gap_target,
            time_limit=config.time_limit,
            threads=config.solver_threads,
        )
        values.update(overrides)
        return cls(**values)

    def stage_options(self) -> SolverOptions:
        stage_limit = None if self.time_limit is None else self.time_limit / 4
        return SolverOptions(gap_target=self.gap_target, time_limit=stage_limit, threads=self.threads)

    def final_options(self, warm_start: Mapping[str, float] | None = None) -> SolverOptions:
        return SolverOptions(
            gap_target=self.gap_target, time_limit=self.time_limit, threads=self.threads, warm_start=warm_start
        )


@dataclass(frozen=True)
class StageRecord:
    name: str
    status: SolveStatus
    objective: float | None
    fixed_to_zero: int
    integral: int
    seconds: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return {
            "stage": self.name,
            "status": self.status.value,
            "objective": self.objective,
            "fixedToZero": self.fixed_to_zero,
            "integral": self.integral,
        }


@dataclass(frozen=True)
class WarmStartOutcome:
    assignment: dict[str, float]
    objective: float | None
    stages: tuple[StageRecord, ...]
    success: bool
    failed_stage: str | None = None
    seconds: float = 0.0
    models: tuple[ModelSpec, ...] = field(default=(), repr=False, compare=False)

    def stage_log(self) -> list[dict]:
        return [stage.to_dict() for stage in self.stages]

    def stage_log_json(self) -> str:
        return json.dumps({"success": self.success, "failedStage": self.failed_stage, "stages": self.stage_log()}, indent=2)

    def summary(self) -> WarmStartSummary:
        return WarmStartSummary(
            objective=self.objective,
            seconds=self.seconds,
            success=self.success,
            failed_stage=self.failed_stage,
            solves=len(self.stages),
            stages=tuple(self.stage_log()),
        )


class _Stages:
    def __init__(self, backend, options: SolverOptions):
        self.backend = backend
        self.options = options
        self.records: list[StageRecord] = []
        self.models: list[ModelSpec] = []

    def run(self, name: str, model: ModelSpec, fixed: int, integral: int, relax_all: bool = False) -> SolveResult:
        options = SolverOptions(
            relax_all=relax_all,
            gap_target=self.options.gap_target,
            time_limit=self.options.time_limit,
            threads=self.options.threads,
        )
        started = time.perf_counter()
        try:
            result = self.backend.solve(model, options)
        except Exception as exc:
            logger.error("Warm-start stage %s raised: %s", name, exc)
            result = SolveResult(SolveStatus.ERROR, message=str(exc))
        seconds = time.perf_counter() - started
        self.records.append(StageRecord(name, result.status, result.objective, fixed, integral, seconds))
        self.models.append(model)
        logger.info(
            "Warm-start stage %s: %s objective=%s fixed=%d integral=%d in %.2fs",
            name, result.status.value, result.objective, fixed, integral, seconds,
        )
        return result


def _below(values: Mapping[str, float], ids, epsilon: float, fixed: set[str]) -> dict[str, float]:
    return {var_id: 0.0 for var_id in ids if var_id not in fixed and values.get(var_id, 0.0) < epsilon}


def compute_warm_start(built: BuiltModel, config: WarmStartConfig | None = None, backend=None) -> WarmStartOutcome:
    config = config or WarmStartConfig()
    backend = backend or get_backend()
    partition = VariablePartition.from_built(built, config.group_order)
    stages = _Stages(backend, config.stage_options())
    started = time.perf_counter()

    def failed(stage: str) -> WarmStartOutcome:
        logger.warning("Warm start failed at stage %s", stage)
        return WarmStartOutcome(
            {}, None, tuple(stages.records), False, stage, time.perf_counter() - started, tuple(stages.models)
        )

    working = relax(built.model)
    result = stages.run("relaxation", working, 0, 0, relax_all=True)
    if not result.has_solution:
        return failed("relaxation")
    fixed: set[str] = set()

    if partition.extra:
        zeros = _below(result.values, partition.extra, config.epsilon, fixed)
        working = fix_variables(working, zeros)
        fixed.update(zeros)
        remaining = [var_id for var_id in partition.extra if var_id not in fixed]
        working = set_integrality(working, remaining, True)
        result = stages.run("extras", working, len(zeros), len(remaining))
        if not result.has_solution:
            return failed("extras")
        selected = {var_id: float(round(result.values.get(var_id, 0.0))) for var_id in remaining}
        working = fix_variables(working, selected)
        fixed.update(selected)

    last = len(partition.groups) - 1
    for position, (name, group) in enumerate(partition.groups):
        zeros = _below(result.values, group, config.epsilon, fixed)
        working = fix_variables(working, zeros)
        fixed.update(zeros)
        integral = [var_id for var_id in group if var_id not in fixed]
        if position == last:
            integral += list(partition.tail)
        working = set_integrality(working, integral, True)
        result = stages.run(name, working, len(zeros), len(integral))
        if not result.has_solution:
            return failed(name)

    assignment = {var.id: result.values.get(var.id, 0.0) for var in built.model.variables}
    objective = built.model.objective(assignment)
    seconds = time.perf_counter() - started
    logger.info("Warm start found objective %.4f in %.2fs over %d solves", objective, seconds, len(stages.records))
    return WarmStartOutcome(assignment, objective, tuple(stages.records), True, None, seconds, tuple(stages.models))


def solve_with_warm_start(built: BuiltModel, config: WarmStartConfig | None = None, backend=None) -> SolveResult:
    """Run the warm start, hand its assignment to the exact solve, and keep the better of the two."""
    config = config or WarmStartConfig()
    backend = backend or get_backend()
    started = time.perf_counter()
    outcome = compute_warm_start(built, config, backend)
    summary = outcome.summary()

    if not outcome.success:
        logger.warning("Falling back to a cold solve after warm-start failure at %s", outcome.failed_stage)
        result = backend.solve(built.model, config.final_options())
        return _with_summary(result, summary, time.perf_counter() - started)

    result = backend.solve(built.model, config.final_options(outcome.assignment))
    incumbent = outcome.objective
    if not result.has_solution or result.objective is None or result.objective > incumbent + 1e-6 * max(1.0, abs(incumbent)):
        bound = result.best_bound
        gap = None if bound is None else max(0.0, incumbent - bound) / max(abs(incumbent), 1e-9)
        result = SolveResult(
            result.status if result.has_solution else SolveStatus.FEASIBLE_AT_LIMIT,
            objective=incumbent,
            gap=gap,
            values=outcome.assignment,
            best_bound=bound,
            message="final solve did not improve on the warm start",
        )
    return _with_summary(result, summary, time.perf_counter() - started)


def cold_solve(built: BuiltModel, config: WarmStartConfig | None = None, backend=None) -> SolveResult:
    config = config or WarmStartConfig()
    backend = backend or get_backend()
    started = time.perf_counter()
    result = backend.solve(built.model, config.final_options())
    return _with_summary(result, None, time.perf_counter() - started)


def _with_summary(result: SolveResult, summary: WarmStartSummary | None, wall_time: float) -> SolveResult:
    return SolveResult(
        status=result.status,
        objective=result.objective,
        gap=result.gap,
        values=result.values,
        wall_time=wall_time,
        message=result.message,
        best_bound=result.best_bound,
        warm_start=summary,
    )
