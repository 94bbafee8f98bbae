"""Exception hierarchy shared by every railplan module."""

from __future__ import annotations


class PlanError(Exception):
    """Base class for all railplan failures."""


class InstanceError(PlanError):
    """The instance document or value is unusable."""


class SchemaError(InstanceError):
    """The instance document does not parse against the schema."""

    def __init__(self, message: str, loc: str | None = None, line: int | None = None, column: int | None = None):
        self.loc = loc
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if loc:
            where.append(f"field {loc}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class DanglingReference(InstanceError):
    """An id is referenced but never defined."""

    def __init__(self, ref_id: str, where: str):
        self.ref_id = ref_id
        self.where = where
        super().__init__(f"unknown id '{ref_id}' referenced by {where}")


class InvariantViolation(InstanceError):
    """A parsed instance breaks a validation rule."""

    def __init__(self, rule: str, subject: str = ""):
        self.rule = rule
        self.subject = subject
        super().__init__(f"{subject}: {rule}" if subject else rule)


class NetworkError(PlanError):
    pass


class ModelBuildError(PlanError):
    """An index set required by a formulation is missing."""

    def __init__(self, index_set: str, detail: str | None = None):
        self.index_set = index_set
        super().__init__(detail or f"missing index set: {index_set}")


class FixError(PlanError):
    def __init__(self, variable: str, value: float, lower: float, upper: float | None):
        self.variable = variable
        self.value = value
        bound = "inf" if upper is None else f"{upper:g}"
        super().__init__(f"cannot fix {variable} to {value:g}: outside [{lower:g}, {bound}]")


class BackendError(PlanError):
    """Unknown or unavailable solver backend."""


class FingerprintMismatch(PlanError):
    pass


class OracleRefusal(PlanError):
    """The instance is too large for exhaustive enumeration."""


class ReportError(PlanError):
    def __init__(self, path, reason: str):
        self.path = path
        super().__init__(f"cannot write {path}: {reason}")


class ScenarioError(PlanError):
    pass


class GeneratorError(PlanError):
    pass


class SolveFailed(PlanError):
    """The solver returned no usable plan."""


class AuditFailed(PlanError):
    def __init__(self, count: int):
        self.count = count
        super().__init__(f"plan breaks {count} rules")
