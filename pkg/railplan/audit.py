"""Solver-independent re-verification of plans.

Every family of rows is recomputed from the instance, the block legs and the
decoded planning variables; nothing here reads the ``ModelSpec`` rows. The
railcar inventory of each (type, terminal) pair is simulated around one full
cycle.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Mapping

from .blocks import BlockCatalog
from .formulations import ALLOWED_PATTERNS, BuiltModel, Formulation, mixed_top_coefficient
from .instance import ContainerType, Instance, PlatformType, to_money
from .milp import SolveResult, VarKey, VarKind
from .network import NodeKind, TimeSpaceNetwork

logger = logging.getLogger(__name__)

TOLERANCE = 1e-6


@dataclass(frozen=True)
class Violation:
    family: str
    row: str
    magnitude: float
    detail: str = ""

    def __str__(self) -> str:
        return f"[{self.family}] {self.row}: {self.detail} (by {self.magnitude:g})"


@dataclass(frozen=True)
class PlanSolution:
    formulation: Formulation
    values: Mapping[VarKey, float]
    objective: float | None
    gap: float | None = None
    status: str = "optimal"
    timings: Mapping[str, float | None] = field(default_factory=dict)
    instance_fingerprint: str = ""

    @classmethod
    def from_result(cls, built: BuiltModel, result: SolveResult) -> "PlanSolution":
        summary = result.warm_start
        timings = {
            "warmStartSeconds": summary.seconds if summary else None,
            "totalSeconds": result.wall_time,
            "rootGap": result.root_gap,
            "warmStartObjective": summary.objective if summary else None,
        }
        return cls(
            formulation=built.formulation,
            values=built.registry.decode(result.values),
            objective=result.objective,
            gap=result.gap,
            status=result.status.value,
            timings=timings,
            instance_fingerprint=built.instance_fingerprint,
        )

    def value(self, kind: VarKind, *index: str) -> float:
        return self.values.get(VarKey(kind, tuple(index)), 0.0)

    def with_value(self, key: VarKey, value: float) -> "PlanSolution":
        return replace(self, values={**self.values, key: value})

    def of_kind(self, kind: VarKind) -> dict[tuple[str, ...], float]:
        return {key.index: value for key, value in self.values.items() if key.kind is kind}

    def to_json(self) -> str:
        payload = {
            "formulation": self.formulation.value,
            "status": self.status,
            "objective": self.objective,
            "gap": self.gap,
            "timings": dict(self.timings),
            "instanceFingerprint": self.instance_fingerprint,
            "values": {key.encode(): value for key, value in sorted(self.values.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PlanSolution":
        payload = json.loads(text)
        return cls(
            formulation=Formulation(payload["formulation"]),
            values={VarKey.decode(key): float(value) for key, value in payload["values"].items()},
            objective=payload.get("objective"),
            gap=payload.get("gap"),
            status=payload.get("status", "optimal"),
            timings=payload.get("timings", {}),
            instance_fingerprint=payload.get("instanceFingerprint", ""),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PlanSolution":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class CostBreakdown:
    build: Decimal = Decimal(0)
    transfer: Decimal = Decimal(0)
    wait: Decimal = Decimal(0)
    border: Decimal = Decimal(0)
    distance: Decimal = Decimal(0)
    lateness: Decimal = Decimal(0)
    allocation: Decimal = Decimal(0)
    unmet: Decimal = Decimal(0)
    extra_trains: Decimal = Decimal(0)

    @property
    def total(self) -> Decimal:
        return sum((getattr(self, name) for name in self.__dataclass_fields__), Decimal(0))

    def to_dict(self) -> dict[str, str]:
        record = {name: str(getattr(self, name)) for name in self.__dataclass_fields__}
        record["total"] = str(self.total)
        return record


def _dec(value: float) -> Decimal:
    return Decimal(repr(float(value)))


def cost_breakdown(solution: PlanSolution, instance: Instance, catalog: BlockCatalog) -> CostBreakdown:
    """Objective split into its cost components, recomputed from the plan."""
    costs = instance.costs
    parts = dict.fromkeys(CostBreakdown.__dataclass_fields__, Decimal(0))
    for block in catalog.blocks:
        selected = _dec(solution.value(VarKind.BLOCK, block.id))
        parts["build"] += costs.c_build * selected
        parts["transfer"] += costs.c_trans * block.transfers * selected
        flow = sum(
            (_dec(solution.value(VarKind.FLOW, block.id, demand_id)) for demand_id in catalog.demands_for_block.get(block.id, ())),
            Decimal(0),
        )
        empties = sum((_dec(solution.value(VarKind.EMPTY_CARS, block.id, car.id)) for car in instance.railcars), Decimal(0))
        moved = flow + empties
        parts["wait"] += costs.c_wait * block.transfer_wait * moved
        parts["border"] += costs.c_bord * block.border_crossings * moved
        parts["distance"] += costs.c_km * Decimal(str(block.distance)) * moved
        for demand_id in catalog.demands_for_block.get(block.id, ()):
            late = catalog.lateness.get((block.id, demand_id), 0)
            parts["lateness"] += costs.c_late * late * _dec(solution.value(VarKind.FLOW, block.id, demand_id))
    for (car_id, _terminal), value in solution.of_kind(VarKind.ALLOCATION).items():
        parts["allocation"] += costs.c_alloc * instance.railcar(car_id).platform_count * _dec(value)
    for demand in instance.demands:
        parts["unmet"] += instance.outsourcing_cost(demand) * _dec(solution.value(VarKind.UNMET, demand.id))
    for service in instance.extra_services:
        parts["extra_trains"] += instance.extra_service_cost(service) * _dec(solution.value(VarKind.EXTRA, service.id))
    return CostBreakdown(**{name: to_money(value) for name, value in parts.items()})


def block_lengths(solution: PlanSolution, instance: Instance, catalog: BlockCatalog) -> dict[str, float]:
    """Train length in feet each block occupies under the plan's formulation."""
    lengths = {}
    for block in catalog.blocks:
        if solution.formulation is Formulation.UNRESTRICTED_LOADING:
            lengths[block.id] = sum(
                instance.demand(k).container_type.length / 2 * solution.value(VarKind.FLOW, block.id, k)
                for k in catalog.demands_for_block.get(block.id, ())
            )
            continue
        lengths[block.id] = sum(
            car.car_length * (solution.value(VarKind.LOADED_CARS, block.id, car.id) + solution.value(VarKind.EMPTY_CARS, block.id, car.id))
            for car in instance.railcars
        )
    return lengths


def leg_loads(solution: PlanSolution, instance: Instance, catalog: BlockCatalog) -> dict[tuple[str, int], float]:
    """Feet of train length used on every (service, leg) by the plan's blocks."""
    lengths = block_lengths(solution, instance, catalog)
    loads: dict[tuple[str, int], float] = {}
    for block in catalog.blocks:
        for service_id, leg_index in block.legs:
            loads[(service_id, leg_index)] = loads.get((service_id, leg_index), 0.0) + lengths[block.id]
    return loads


class _Auditor:
    def __init__(self, solution: PlanSolution, instance: Instance, catalog: BlockCatalog, network: TimeSpaceNetwork, tolerance: float):
        self.solution = solution
        self.instance = instance
        self.catalog = catalog
        self.network = network
        self.tolerance = tolerance
        self.found: list[Violation] = []

    def flag(self, family: str, row: str, magnitude: float, detail: str) -> None:
        if magnitude > self.tolerance:
            self.found.append(Violation(family, row, magnitude, detail))

    def le(self, family: str, row: str, lhs: float, rhs: float) -> None:
        self.flag(family, row, lhs - rhs, f"{lhs:g} > {rhs:g}")

    def eq(self, family: str, row: str, lhs: float, rhs: float) -> None:
        self.flag(family, row, abs(lhs - rhs), f"{lhs:g} != {rhs:g}")

    def v(self, kind: VarKind, *index: str) -> float:
        return self.solution.value(kind, *index)

    def domains(self) -> None:
        for key, value in self.solution.values.items():
            name = key.encode()
            self.flag("bounds", name, -value, f"negative value {value:g}")
            self.flag("integrality", name, abs(value - round(value)), f"fractional value {value:g}")
            if key.kind in (VarKind.BLOCK, VarKind.EXTRA):
                self.flag("bounds", name, value - 1, f"binary above one: {value:g}")

    def demands(self) -> None:
        for demand in self.instance.demands:
            blocks = self.catalog.blocks_for_demand.get(demand.id, ())
            carried = sum(self.v(VarKind.FLOW, b, demand.id) for b in blocks)
            self.eq("demand_cover", demand.id, carried + self.v(VarKind.UNMET, demand.id), demand.volume)
            for block_id in blocks:
                self.le(
                    "block_link",
                    f"{block_id}/{demand.id}",
                    self.v(VarKind.FLOW, block_id, demand.id),
                    demand.volume * self.v(VarKind.BLOCK, block_id),
                )
        known = {(b, k) for k, blocks in self.catalog.blocks_for_demand.items() for b in blocks}
        for index, value in self.solution.of_kind(VarKind.FLOW).items():
            if index not in known and value > self.tolerance:
                self.flag("demand_cover", "/".join(index), value, "flow on a block outside the demand window")

    def loading(self) -> None:
        railcars = self.instance.railcars
        singles = self.solution.of_kind(VarKind.SINGLE_LOAD)
        pairs = self.solution.of_kind(VarKind.PAIR_LOAD)
        allowed = {(p.platform.value, *(c.value for c in p.containers)) for ps in ALLOWED_PATTERNS.values() for p in ps}
        for index, value in list(singles.items()) + list(pairs.items()):
            if index[1:] not in allowed and value > self.tolerance:
                self.flag("load_count", "/".join(index), value, "forbidden loading pattern")
        for block in self.catalog.blocks:
            demand_ids = self.catalog.demands_for_block.get(block.id, ())
            for container in ContainerType:
                flow = sum(
                    self.v(VarKind.FLOW, block.id, k)
                    for k in demand_ids
                    if self.instance.demand(k).container_type is container
                )
                loaded = 0.0
                for platform in PlatformType:
                    loaded += self.v(VarKind.SINGLE_LOAD, block.id, platform.value, container.value)
                    for pattern in ALLOWED_PATTERNS[platform]:
                        if pattern.is_pair and pattern.count(container):
                            index = (block.id, platform.value, *(c.value for c in pattern.containers))
                            loaded += pattern.count(container) * pairs.get(index, 0.0)
                self.eq("load_count", f"{block.id}/{container.value}", loaded, flow)
            for platform in PlatformType:
                used = sum(
                    self.v(VarKind.SINGLE_LOAD, block.id, platform.value, c.value) for c in ContainerType
                ) + sum(
                    pairs.get((block.id, platform.value, *(c.value for c in p.containers)), 0.0)
                    for p in ALLOWED_PATTERNS[platform]
                    if p.is_pair
                )
                cars = [car for car in railcars if car.platform_type is platform]
                available = sum(car.platform_count * self.v(VarKind.LOADED_CARS, block.id, car.id) for car in cars)
                loaded_cars = sum(self.v(VarKind.LOADED_CARS, block.id, car.id) for car in cars)
                self.le("platform_upper", f"{block.id}/{platform.value}", used, available)
                self.le("platform_lower", f"{block.id}/{platform.value}", loaded_cars, used)
            mixed = pairs.get((block.id, PlatformType.P40.value, ContainerType.T40.value, ContainerType.T53.value), 0.0)
            room = sum(mixed_top_coefficient(car) * self.v(VarKind.LOADED_CARS, block.id, car.id) for car in railcars)
            self.le("mixed_top", block.id, mixed, room)

    def capacities(self) -> None:
        usage = block_lengths(self.solution, self.instance, self.catalog)
        for block in self.catalog.blocks:
            self.le("block_length", block.id, usage[block.id], block.capacity * self.v(VarKind.BLOCK, block.id))
        per_leg = leg_loads(self.solution, self.instance, self.catalog)
        for service in self.instance.services:
            selected = self.v(VarKind.EXTRA, service.id) if service.is_extra else 1.0
            min_legs = set(service.min_load_leg_indices()) if service.is_extra else set()
            for leg_index, leg in enumerate(service.legs):
                row = f"{service.id}/{leg_index}"
                load = per_leg.get((service.id, leg_index), 0.0)
                family = "extra_capacity" if service.is_extra else "leg_capacity"
                self.le(family, row, load, leg.capacity * selected)
                if leg_index in min_legs:
                    needed = service.min_load_fraction * leg.capacity * selected
                    self.flag("extra_min_load", row, needed - load, f"{load:g} below {needed:g}")

    def inventories(self) -> None:
        """Walk each terminal's pool events once around the cycle for every railcar type."""
        network, catalog = self.network, self.catalog
        departing: dict[str, list[str]] = {}
        arriving: dict[str, list[str]] = {}
        wrapping: dict[str, list[str]] = {}
        for block in catalog.blocks:
            departing.setdefault(network.companion(block.first_event, NodeKind.POOLMINUS), []).append(block.id)
            arriving.setdefault(network.companion(block.last_event, NodeKind.POOLPLUS), []).append(block.id)
            if block.departure + block.duration >= network.period:
                wrapping.setdefault(block.origin, []).append(block.id)
        for car in self.instance.railcars:
            def moved(block_id: str) -> float:
                return self.v(VarKind.LOADED_CARS, block_id, car.id) + self.v(VarKind.EMPTY_CARS, block_id, car.id)

            fleet = 0.0
            for terminal in self.instance.terminals:
                chain = network.pool_sequence.get(terminal.id, ())
                if not chain:
                    continue
                allocated = self.v(VarKind.ALLOCATION, car.id, terminal.id)
                fleet += allocated
                in_transit = sum(moved(b) for b in wrapping.get(terminal.id, ()))
                start = allocated - in_transit
                stock = start
                where = f"{car.id}/{terminal.id}"
                self.flag("inventory", f"{where}/start", -stock, f"negative start inventory {stock:g}")
                for node_id in chain:
                    if network.nodes[node_id].kind is NodeKind.POOLPLUS:
                        stock += sum(moved(b) for b in arriving.get(node_id, ()))
                    else:
                        stock -= sum(moved(b) for b in departing.get(node_id, ()))
                    self.flag("inventory", f"{where}/{node_id}", -stock, f"negative inventory {stock:g}")
                    self.eq("pool_balance", f"{where}/{node_id}", self.v(VarKind.POOL, car.id, terminal.id, node_id), stock)
                self.eq("fleet_count", where, allocated, self.v(VarKind.POOL, car.id, terminal.id, chain[-1]) + in_transit)
                self.eq("periodicity", where, stock, start)
                limit = car.terminal_limits.get(terminal.id)
                if limit is not None:
                    self.le("terminal_cap", where, allocated, limit)
            if car.fleet_limit is not None:
                self.le("fleet_cap", car.id, fleet, car.fleet_limit)

    def objective(self) -> None:
        if self.solution.objective is None:
            return
        total = float(cost_breakdown(self.solution, self.instance, self.catalog).total)
        scale = max(1.0, abs(total))
        self.flag("objective", "total", abs(total - self.solution.objective) / scale, f"components sum to {total:g}, reported {self.solution.objective:g}")


def audit_solution(
    solution: PlanSolution,
    built: BuiltModel | None,
    instance: Instance,
    catalog: BlockCatalog,
    network: TimeSpaceNetwork,
    tolerance: float = TOLERANCE,
) -> list[Violation]:
    """Every broken rule of a plan; an empty list means the plan is sound."""
    auditor = _Auditor(solution, instance, catalog, network, tolerance)
    if built is not None:
        present = set(solution.values)
        for key, _ in built.registry.pairs:
            if key not in present:
                auditor.flag("coverage", key.encode(), 1.0, "variable missing from the solution")
    auditor.domains()
    auditor.demands()
    if solution.formulation is not Formulation.UNRESTRICTED_LOADING:
        auditor.loading()
    auditor.capacities()
    if solution.formulation is Formulation.SSNDRM:
        auditor.inventories()
    auditor.objective()
    if auditor.found:
        counts = Counter(v.family for v in auditor.found)
        logger.warning("Audit found %d violations: %s", len(auditor.found), dict(sorted(counts.items())))
    return auditor.found


def inventory_totals(solution: PlanSolution, instance: Instance) -> dict[str, float]:
    """Cars of each type the plan keeps in circulation."""
    totals = dict.fromkeys((car.id for car in instance.railcars), 0.0)
    for (car_id, _terminal), value in solution.of_kind(VarKind.ALLOCATION).items():
        totals[car_id] = totals.get(car_id, 0.0) + value
    return totals


def is_integral(value: float, tolerance: float = TOLERANCE) -> bool:
    return math.isclose(value, round(value), abs_tol=tolerance)
