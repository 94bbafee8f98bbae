"""Instance schema, loading, validation and cyclic-time arithmetic.

Every other module consumes the frozen pydantic models defined here. Times are
integer minutes inside one schedule cycle of length ``T``; capacities and
lengths are feet; distances are kilometres; money is a fixed-point decimal.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import Mapping

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError
from pydantic.alias_generators import to_camel

from .errors import DanglingReference, InvariantViolation, SchemaError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MONEY_QUANTUM = Decimal("0.0001")


def cyclic_duration(start: int, end: int, period: int) -> int:
    """Minutes from ``start`` forward to ``end`` on a cycle of ``period`` minutes."""
    return (end - start) % period


def to_money(value) -> Decimal:
    if not isinstance(value, Decimal):
        value = Decimal(str(value))
    return value.quantize(MONEY_QUANTUM)


class ContainerType(str, Enum):
    T40 = "T40"
    T53 = "T53"

    @property
    def length(self) -> int:
        return 40 if self is ContainerType.T40 else 53


class PlatformType(str, Enum):
    P40 = "P40"
    P53 = "P53"

    @property
    def length(self) -> int:
        return 40 if self is PlatformType.P40 else 53


class ServiceKind(str, Enum):
    REGULAR = "regular"
    EXTRA = "extraCandidate"


class _Schema(BaseModel):
    model_config = ConfigDict(
        frozen=True,
        extra="forbid",
        alias_generator=to_camel,
        populate_by_name=True,
        use_enum_values=False,
    )


class Terminal(_Schema):
    id: str
    name: str = ""
    region: str


class Stop(_Schema):
    terminal: str
    arrival: int | None = None
    departure: int | None = None


class Leg(_Schema):
    capacity: int
    distance: float


class TrainService(_Schema):
    id: str
    kind: ServiceKind = ServiceKind.REGULAR
    stops: tuple[Stop, ...]
    legs: tuple[Leg, ...]
    fixed_cost: Decimal | None = None
    min_load_fraction: float = 0.5
    min_load_legs: tuple[int, ...] | None = None

    @property
    def is_extra(self) -> bool:
        return self.kind is ServiceKind.EXTRA

    @property
    def origin(self) -> str:
        return self.stops[0].terminal

    @property
    def destination(self) -> str:
        return self.stops[-1].terminal

    def leg_duration(self, leg: int, period: int) -> int:
        return cyclic_duration(self.stops[leg].departure, self.stops[leg + 1].arrival, period)

    def min_load_leg_indices(self) -> tuple[int, ...]:
        if self.min_load_legs is None:
            return tuple(range(len(self.legs)))
        return tuple(sorted(set(self.min_load_legs)))


class Demand(_Schema):
    id: str
    origin: str
    destination: str
    release: int
    due: int
    volume: int = Field(ge=1)
    container_type: ContainerType
    outsourcing_cost: Decimal | None = None


class RailcarType(_Schema):
    id: str
    platform_type: PlatformType
    platform_count: int = Field(ge=1)
    car_length: float
    fleet_limit: int | None = Field(default=None, ge=0)
    terminal_limits: dict[str, int] = Field(default_factory=dict)

    @property
    def slots(self) -> int:
        return 2 * self.platform_count


class CostParams(_Schema):
    c_build: Decimal = Decimal("100")
    c_trans: Decimal = Decimal("10020")
    c_wait: Decimal = Decimal("1")
    c_bord: Decimal = Decimal("1000")
    c_km: Decimal = Decimal("0.75")
    c_late: Decimal = Decimal("1")
    c_alloc: Decimal = Decimal("200")
    c_ndel: Decimal = Decimal("100000")
    c_fix: Decimal = Decimal("700000")
    c_var: Decimal = Decimal("0.01")


class PlanningConfig(_Schema):
    schedule_length: int = 10080
    transfer_time: int
    warm_start_epsilon: float = 1e-5
    mip_gap_target: float = 0.025
    time_limit: float = 600.0
    solver_threads: int = 1


class Instance(_Schema):
    schema_version: int = SCHEMA_VERSION
    terminals: tuple[Terminal, ...]
    services: tuple[TrainService, ...]
    demands: tuple[Demand, ...] = ()
    railcars: tuple[RailcarType, ...] = ()
    costs: CostParams = Field(default_factory=CostParams)
    config: PlanningConfig

    _terminals: dict = PrivateAttr(default_factory=dict)
    _services: dict = PrivateAttr(default_factory=dict)
    _demands: dict = PrivateAttr(default_factory=dict)
    _railcars: dict = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        self._terminals = {t.id: t for t in self.terminals}
        self._services = {s.id: s for s in self.services}
        self._demands = {d.id: d for d in self.demands}
        self._railcars = {r.id: r for r in self.railcars}

    @property
    def period(self) -> int:
        return self.config.schedule_length

    def terminal(self, terminal_id: str) -> Terminal:
        return self._terminals[terminal_id]

    def service(self, service_id: str) -> TrainService:
        return self._services[service_id]

    def demand(self, demand_id: str) -> Demand:
        return self._demands[demand_id]

    def railcar(self, railcar_id: str) -> RailcarType:
        return self._railcars[railcar_id]

    @property
    def regular_services(self) -> tuple[TrainService, ...]:
        return tuple(s for s in self.services if not s.is_extra)

    @property
    def extra_services(self) -> tuple[TrainService, ...]:
        return tuple(s for s in self.services if s.is_extra)

    def outsourcing_cost(self, demand: Demand) -> Decimal:
        if demand.outsourcing_cost is not None:
            return to_money(demand.outsourcing_cost)
        return to_money(self.costs.c_ndel)

    def extra_service_cost(self, service: TrainService) -> Decimal:
        """Fixed cost of running an extra train: the stated value or the per-leg formula."""
        if service.fixed_cost is not None:
            return to_money(service.fixed_cost)
        haul = sum(Decimal(leg.capacity) * Decimal(str(leg.distance)) for leg in service.legs)
        return to_money(self.costs.c_fix + self.costs.c_var * haul)

    def with_changes(self, **changes) -> "Instance":
        """Copy with some top-level fields replaced; lookup tables are rebuilt."""
        fields = {name: getattr(self, name) for name in type(self).model_fields}
        fields.update(changes)
        return type(self)(**fields)

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, exclude_none=True, indent=2) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def default_railcar_catalog() -> tuple[RailcarType, ...]:
    """Six well-car types; car length per platform shrinks as the platform count grows."""
    lengths = {
        (PlatformType.P40, 1): 48.0,
        (PlatformType.P40, 3): 130.0,
        (PlatformType.P40, 5): 205.0,
        (PlatformType.P53, 1): 66.0,
        (PlatformType.P53, 3): 183.0,
        (PlatformType.P53, 5): 295.0,
    }
    return tuple(
        RailcarType(
            id=f"{count}x{platform.length}",
            platform_type=platform,
            platform_count=count,
            car_length=length,
        )
        for (platform, count), length in lengths.items()
    )


@dataclass(frozen=True)
class Issue:
    rule: str
    subject: str
    severity: str = "error"

    def __str__(self) -> str:
        return f"{self.severity}: {self.subject}: {self.rule}"


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[Issue, ...] = ()

    @property
    def violations(self) -> tuple[Issue, ...]:
        return tuple(i for i in self.issues if i.severity == "error")

    @property
    def warnings(self) -> tuple[Issue, ...]:
        return tuple(i for i in self.issues if i.severity == "warning")

    @property
    def ok(self) -> bool:
        return not self.violations


def _duplicates(ids) -> list[str]:
    return sorted(i for i, n in Counter(ids).items() if n > 1)


def validate_instance(instance: Instance) -> ValidationReport:
    """Collect every rule an instance breaks; never raises and never mutates."""
    issues: list[Issue] = []

    def fail(subject: str, rule: str, severity: str = "error") -> None:
        issues.append(Issue(rule=rule, subject=subject, severity=severity))

    cfg = instance.config
    period = cfg.schedule_length
    if period <= 0:
        fail("config", "schedule length must be positive")
        period = 1
    if not 0 <= cfg.transfer_time < period:
        fail("config", "transfer time must lie in [0, T)")
    if cfg.warm_start_epsilon <= 0:
        fail("config", "warm-start epsilon must be positive")
    if cfg.mip_gap_target < 0:
        fail("config", "gap target must be non-negative")
    if cfg.solver_threads < 1:
        fail("config", "solver threads must be at least 1")

    for name, value in instance.costs:
        if value < 0:
            fail("costs", f"{to_camel(name)} must be non-negative")

    for dup in _duplicates(t.id for t in instance.terminals):
        fail(f"terminal {dup}", "terminal ids must be unique")
    for terminal in instance.terminals:
        if not terminal.region.strip():
            fail(f"terminal {terminal.id}", "region must be non-empty")
    known_terminals = {t.id for t in instance.terminals}

    if not instance.services:
        fail("services", "schedule must contain at least one service")
    for dup in _duplicates(s.id for s in instance.services):
        fail(f"service {dup}", "service ids must be unique")
    for service in instance.services:
        subject = f"service {service.id}"
        stops = service.stops
        if len(stops) < 2:
            fail(subject, "service needs at least two stops")
            continue
        if len(service.legs) != len(stops) - 1:
            fail(subject, "service needs exactly one leg per pair of consecutive stops")
            continue
        for index, stop in enumerate(stops):
            if stop.terminal not in known_terminals:
                fail(subject, f"stop {index} references unknown terminal {stop.terminal}")
            if index > 0 and stop.arrival is None:
                fail(subject, f"stop {index} needs an arrival time")
            if index < len(stops) - 1 and stop.departure is None:
                fail(subject, f"stop {index} needs a departure time")
            if index == 0 and stop.arrival is not None:
                fail(subject, "origin stop must not have an arrival time")
            if index == len(stops) - 1 and stop.departure is not None:
                fail(subject, "destination stop must not have a departure time")
            for moment in (stop.arrival, stop.departure):
                if moment is not None and not 0 <= moment < period:
                    fail(subject, f"stop {index} time {moment} outside [0, T)")
        for index, leg in enumerate(service.legs):
            if leg.capacity <= 0:
                fail(f"{subject} leg {index}", "leg capacity must be positive")
            if leg.distance <= 0:
                fail(f"{subject} leg {index}", "leg distance must be positive")
            departure, arrival = stops[index].departure, stops[index + 1].arrival
            if departure is not None and arrival is not None and cyclic_duration(departure, arrival, period) == 0:
                fail(f"{subject} leg {index}", "leg duration must be positive")
        if not 0 <= service.min_load_fraction <= 1:
            fail(subject, "minimum load fraction must lie in [0, 1]")
        if service.min_load_legs is not None:
            for index in service.min_load_legs:
                if not 0 <= index < len(service.legs):
                    fail(subject, f"minimum-load leg {index} does not exist")
        if not service.is_extra and service.fixed_cost is not None:
            fail(subject, "only extra candidates carry a fixed cost", "warning")

    for dup in _duplicates(d.id for d in instance.demands):
        fail(f"demand {dup}", "demand ids must be unique")
    for demand in instance.demands:
        subject = f"demand {demand.id}"
        if demand.origin == demand.destination:
            fail(subject, "origin and destination must differ")
        for ref in (demand.origin, demand.destination):
            if ref not in known_terminals:
                fail(subject, f"unknown terminal {ref}")
        for moment in (demand.release, demand.due):
            if not 0 <= moment < period:
                fail(subject, f"time {moment} outside [0, T)")

    for dup in _duplicates(r.id for r in instance.railcars):
        fail(f"railcar {dup}", "railcar ids must be unique")
    for railcar in instance.railcars:
        if railcar.car_length <= 0:
            fail(f"railcar {railcar.id}", "car length must be positive")
        for terminal_id, limit in railcar.terminal_limits.items():
            if terminal_id not in known_terminals:
                fail(f"railcar {railcar.id}", f"unknown terminal {terminal_id}")
            if limit < 0:
                fail(f"railcar {railcar.id}", "terminal allocation limit must be non-negative")
    for platform in PlatformType:
        family = sorted(
            (r for r in instance.railcars if r.platform_type is platform and r.car_length > 0),
            key=lambda r: r.platform_count,
        )
        for shorter, longer in zip(family, family[1:]):
            if longer.platform_count == shorter.platform_count:
                continue
            if longer.car_length / longer.platform_count >= shorter.car_length / shorter.platform_count:
                fail(
                    f"railcar {longer.id}",
                    "car length per platform should decrease as the platform count grows",
                    "warning",
                )

    return ValidationReport(tuple(issues))


def _check_references(instance: Instance) -> None:
    known = {t.id for t in instance.terminals}
    for service in instance.services:
        for index, stop in enumerate(service.stops):
            if stop.terminal not in known:
                raise DanglingReference(stop.terminal, f"service {service.id} stop {index}")
    for demand in instance.demands:
        for ref in (demand.origin, demand.destination):
            if ref not in known:
                raise DanglingReference(ref, f"demand {demand.id}")
    for railcar in instance.railcars:
        for ref in railcar.terminal_limits:
            if ref not in known:
                raise DanglingReference(ref, f"railcar {railcar.id} terminal limits")


def parse_instance(data: Mapping) -> Instance:
    try:
        instance = Instance.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(part) for part in first["loc"])
        raise SchemaError(first["msg"], loc=loc) from exc
    if instance.schema_version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {instance.schema_version}", loc="schemaVersion")
    _check_references(instance)
    report = validate_instance(instance)
    for warning in report.warnings:
        logger.warning("Instance warning: %s", warning)
    if report.violations:
        first = report.violations[0]
        raise InvariantViolation(first.rule, first.subject)
    return instance


def load_instance(path: str | Path) -> Instance:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    instance = parse_instance(data)
    logger.info(
        "Loaded instance %s: %d terminals, %d services, %d demands, %d railcar types",
        path.name,
        len(instance.terminals),
        len(instance.services),
        len(instance.demands),
        len(instance.railcars),
    )
    return instance


def save_instance(instance: Instance, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(instance.to_json(), encoding="utf-8")
    return path
