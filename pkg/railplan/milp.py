"""Solver-agnostic linear model values and the transformations used by warm starts.

A ``ModelSpec`` is an immutable value: fixing, relaxing or toggling integrality
returns a new model and never touches its input. Columns are addressed by
sanitized string ids; ``VariableRegistry`` maps the planning variables (block
selection, flows, railcar counts, loading patterns) onto those ids.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Iterable, Mapping

from .errors import FixError, ModelBuildError

logger = logging.getLogger(__name__)

INTEGRALITY_TOLERANCE = 1e-6
FEASIBILITY_TOLERANCE = 1e-7


class Sense(str, Enum):
    LE = "<="
    EQ = "="
    GE = ">="


@dataclass(frozen=True)
class Variable:
    id: str
    lower: float = 0.0
    upper: float | None = None
    integer: bool = False
    cost: float = 0.0


@dataclass(frozen=True)
class Constraint:
    id: str
    terms: tuple[tuple[str, float], ...]
    sense: Sense
    rhs: float
    family: str = ""

    def activity(self, values: Mapping[str, float]) -> float:
        return sum(coef * values.get(var, 0.0) for var, coef in self.terms)

    def violation(self, values: Mapping[str, float]) -> float:
        lhs = self.activity(values)
        if self.sense is Sense.LE:
            return max(0.0, lhs - self.rhs)
        if self.sense is Sense.GE:
            return max(0.0, self.rhs - lhs)
        return abs(lhs - self.rhs)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    variables: tuple[Variable, ...]
    constraints: tuple[Constraint, ...]

    def __post_init__(self):
        seen = set()
        for var in self.variables:
            if var.id in seen:
                raise ModelBuildError("variables", f"duplicate variable id {var.id}")
            seen.add(var.id)
        rows = set()
        for row in self.constraints:
            if row.id in rows:
                raise ModelBuildError("constraints", f"duplicate constraint id {row.id}")
            rows.add(row.id)
            for var, _ in row.terms:
                if var not in seen:
                    raise ModelBuildError("variables", f"unknown variable {var} referenced by {row.id}")

    @cached_property
    def _index(self) -> dict[str, Variable]:
        return {var.id: var for var in self.variables}

    def variable(self, var_id: str) -> Variable:
        return self._index[var_id]

    def __contains__(self, var_id: str) -> bool:
        return var_id in self._index

    def objective(self, values: Mapping[str, float]) -> float:
        return sum(var.cost * values.get(var.id, 0.0) for var in self.variables)

    @property
    def integer_ids(self) -> tuple[str, ...]:
        return tuple(var.id for var in self.variables if var.integer)


class VarKind(str, Enum):
    EXTRA = "s"
    BLOCK = "y"
    FLOW = "z_bk"
    UNMET = "z_k"
    LOADED_CARS = "x"
    EMPTY_CARS = "w_b"
    ALLOCATION = "w_theta"
    POOL = "w_pool"
    SINGLE_LOAD = "nu_single"
    PAIR_LOAD = "nu_pair"


# index width per kind; the last part may itself contain "|" (pool node ids)
INDEX_WIDTH = {
    VarKind.EXTRA: 1,
    VarKind.BLOCK: 1,
    VarKind.FLOW: 2,
    VarKind.UNMET: 1,
    VarKind.LOADED_CARS: 2,
    VarKind.EMPTY_CARS: 2,
    VarKind.ALLOCATION: 2,
    VarKind.POOL: 3,
    VarKind.SINGLE_LOAD: 3,
    VarKind.PAIR_LOAD: 4,
}


@dataclass(frozen=True, order=True)
class VarKey:
    kind: VarKind
    index: tuple[str, ...]

    def encode(self) -> str:
        return "|".join((self.kind.value, *self.index))

    @classmethod
    def decode(cls, text: str) -> "VarKey":
        kind, *index = text.split("|")
        kind = VarKind(kind)
        width = INDEX_WIDTH[kind]
        if len(index) < width:
            raise ValueError(f"key {text!r} needs {width} index parts")
        head, tail = index[: width - 1], index[width - 1 :]
        return cls(kind, (*head, "|".join(tail)))


@dataclass(frozen=True)
class VariableRegistry:
    """Bidirectional map between planning-variable keys and model column ids."""

    pairs: tuple[tuple[VarKey, str], ...]
    _by_key: dict[VarKey, str] = field(default_factory=dict, init=False, repr=False, compare=False)
    _by_id: dict[str, VarKey] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for key, var_id in self.pairs:
            if key in self._by_key or var_id in self._by_id:
                raise ModelBuildError("registry", f"registry entry {key.encode()} -> {var_id} is not injective")
            self._by_key[key] = var_id
            self._by_id[var_id] = key

    def column(self, key: VarKey) -> str:
        return self._by_key[key]

    def get(self, key: VarKey) -> str | None:
        return self._by_key.get(key)

    def key(self, var_id: str) -> VarKey:
        return self._by_id[var_id]

    def ids_of(self, *kinds: VarKind) -> tuple[str, ...]:
        wanted = set(kinds)
        return tuple(var_id for key, var_id in self.pairs if key.kind in wanted)

    def keys_of(self, kind: VarKind) -> tuple[VarKey, ...]:
        return tuple(key for key, _ in self.pairs if key.kind is kind)

    def kinds(self) -> set[VarKind]:
        return {key.kind for key, _ in self.pairs}

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, key: VarKey) -> bool:
        return key in self._by_key

    def decode(self, values: Mapping[str, float]) -> dict[VarKey, float]:
        return {self._by_id[var_id]: value for var_id, value in values.items() if var_id in self._by_id}


@dataclass(frozen=True)
class SolverOptions:
    relax_all: bool = False
    gap_target: float = 0.025
    time_limit: float | None = None
    threads: int = 1
    warm_start: Mapping[str, float] | None = None
    integrality_tolerance: float = INTEGRALITY_TOLERANCE
    feasibility_tolerance: float = FEASIBILITY_TOLERANCE

    def __post_init__(self):
        if self.gap_target < 0:
            raise ValueError("gap target must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    FEASIBLE_AT_LIMIT = "feasibleAtLimit"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ERROR = "error"


@dataclass(frozen=True)
class WarmStartSummary:
    objective: float | None
    seconds: float
    success: bool
    failed_stage: str | None
    solves: int
    stages: tuple[dict, ...] = ()


@dataclass(frozen=True)
class SolveResult:
    status: SolveStatus
    objective: float | None = None
    gap: float | None = None
    values: Mapping[str, float] = field(default_factory=dict)
    wall_time: float = 0.0
    message: str = ""
    best_bound: float | None = None
    warm_start: WarmStartSummary | None = None

    @property
    def has_solution(self) -> bool:
        return self.status in (SolveStatus.OPTIMAL, SolveStatus.FEASIBLE_AT_LIMIT)

    @property
    def root_gap(self) -> float | None:
        """Gap of the injected warm start against the final bound."""
        if self.warm_start is None or not self.warm_start.success or self.warm_start.objective is None:
            return None
        bound = self.best_bound if self.best_bound is not None else self.objective
        if bound is None:
            return None
        incumbent = self.warm_start.objective
        return max(0.0, incumbent - bound) / max(abs(incumbent), 1e-9)

    def log_record(self) -> dict:
        record = {
            "status": self.status.value,
            "objective": self.objective,
            "bestBound": self.best_bound,
            "gap": self.gap,
            "wallTime": round(self.wall_time, 3),
            "message": self.message,
        }
        if self.warm_start is not None:
            record["warmStart"] = {
                "objective": self.warm_start.objective,
                "seconds": round(self.warm_start.seconds, 3),
                "success": self.warm_start.success,
                "failedStage": self.warm_start.failed_stage,
                "solves": self.warm_start.solves,
                "stages": list(self.warm_start.stages),
            }
            record["rootGap"] = self.root_gap
        return record


def fix_variables(model: ModelSpec, assignments: Mapping[str, float], tolerance: float = FEASIBILITY_TOLERANCE) -> ModelSpec:
    if not assignments:
        return model
    updated = []
    for var in model.variables:
        if var.id not in assignments:
            updated.append(var)
            continue
        value = float(assignments[var.id])
        upper = math.inf if var.upper is None else var.upper
        if value < var.lower - tolerance or value > upper + tolerance:
            raise FixError(var.id, value, var.lower, var.upper)
        updated.append(replace(var, lower=value, upper=value))
    unknown = set(assignments) - {var.id for var in model.variables}
    if unknown:
        raise ModelBuildError("variables", f"unknown variable {sorted(unknown)[0]}")
    return replace(model, variables=tuple(updated))


def set_integrality(model: ModelSpec, variable_ids: Iterable[str], integral: bool) -> ModelSpec:
    wanted = set(variable_ids)
    missing = wanted - {var.id for var in model.variables}
    if missing:
        raise ModelBuildError("variables", f"unknown variable {sorted(missing)[0]}")
    updated = tuple(replace(var, integer=integral) if var.id in wanted else var for var in model.variables)
    return replace(model, variables=updated)


def relax(model: ModelSpec) -> ModelSpec:
    return set_integrality(model, [var.id for var in model.variables], False)


@dataclass(frozen=True)
class RowViolation:
    row: str
    family: str
    magnitude: float


def row_violations(model: ModelSpec, values: Mapping[str, float], tolerance: float = INTEGRALITY_TOLERANCE) -> list[RowViolation]:
    """Re-check every row, bound and integrality flag of a model against values."""
    found = []
    for row in model.constraints:
        excess = row.violation(values)
        if excess > tolerance:
            found.append(RowViolation(row.id, row.family, excess))
    for var in model.variables:
        value = values.get(var.id, 0.0)
        if value < var.lower - tolerance:
            found.append(RowViolation(var.id, "bounds", var.lower - value))
        if var.upper is not None and value > var.upper + tolerance:
            found.append(RowViolation(var.id, "bounds", value - var.upper))
        if var.integer and abs(value - round(value)) > tolerance:
            found.append(RowViolation(var.id, "integrality", abs(value - round(value))))
    return found


def solve(model: ModelSpec, options: SolverOptions | None = None, backend=None) -> SolveResult:
    from .backends import get_backend

    backend = backend or get_backend()
    return backend.solve(model, options or SolverOptions())
