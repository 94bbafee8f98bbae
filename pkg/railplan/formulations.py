"""Builders for the fleet-aware planning model and its two baselines.

``build_ssndrm`` couples blocking, container loading and empty-railcar
repositioning. ``build_unrestricted_fleet`` drops every empty-car and fleet
term, and ``build_unrestricted_loading`` also drops railcars and loading
patterns, charging half a container length per container instead.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from typing import Iterable

from .blocks import BlockCatalog, BlockPath
from .errors import ModelBuildError
from .instance import ContainerType, Instance, PlatformType, RailcarType, to_money
from .milp import Constraint, ModelSpec, Sense, Variable, VariableRegistry, VarKey, VarKind
from .network import NodeKind, TimeSpaceNetwork

logger = logging.getLogger(__name__)


class Formulation(str, Enum):
    SSNDRM = "ssndrm"
    UNRESTRICTED_FLEET = "uf"
    UNRESTRICTED_LOADING = "ul"


ROW_FAMILIES = (
    "demand_cover",
    "block_link",
    "load_count",
    "platform_upper",
    "platform_lower",
    "mixed_top",
    "block_length",
    "pool_balance",
    "fleet_count",
    "fleet_cap",
    "terminal_cap",
    "leg_capacity",
    "extra_capacity",
    "extra_min_load",
)


@dataclass(frozen=True, order=True)
class LoadPattern:
    """What one platform carries: a single container or an unordered stacked pair."""

    platform: PlatformType
    containers: tuple[ContainerType, ...]

    @property
    def is_pair(self) -> bool:
        return len(self.containers) == 2

    def count(self, container: ContainerType) -> int:
        return self.containers.count(container)

    @property
    def label(self) -> str:
        return "_".join(c.value for c in self.containers)


def _pattern(platform: PlatformType, *containers: ContainerType) -> LoadPattern:
    return LoadPattern(platform, tuple(sorted(containers, key=lambda c: c.length)))


T40, T53 = ContainerType.T40, ContainerType.T53

# 53-ft boxes never sit in a 40-ft well, so a P40 platform carries them only on top of a 40.
ALLOWED_PATTERNS: dict[PlatformType, tuple[LoadPattern, ...]] = {
    PlatformType.P40: (
        _pattern(PlatformType.P40, T40),
        _pattern(PlatformType.P40, T40, T40),
        _pattern(PlatformType.P40, T40, T53),
    ),
    PlatformType.P53: (
        _pattern(PlatformType.P53, T40),
        _pattern(PlatformType.P53, T53),
        _pattern(PlatformType.P53, T40, T40),
        _pattern(PlatformType.P53, T40, T53),
        _pattern(PlatformType.P53, T53, T53),
    ),
}


def mixed_top_coefficient(railcar: RailcarType) -> int:
    """Platforms of a car that may take a 53-ft box on top of a 40-ft one."""
    if railcar.platform_type is not PlatformType.P40:
        return 0
    return math.ceil(railcar.platform_count / 2)


@dataclass(frozen=True)
class BuiltModel:
    model: ModelSpec
    registry: VariableRegistry
    formulation: Formulation
    instance_fingerprint: str
    catalog_fingerprint: str

    def families(self) -> Counter:
        return Counter(row.family for row in self.model.constraints)

    def explain(self) -> str:
        lines = [f"# {self.model.name}: {len(self.model.variables)} columns, {len(self.model.constraints)} rows"]
        lines.extend(f"{row.id}\t{row.family}" for row in self.model.constraints)
        return "\n".join(lines) + "\n"


def _safe(part: str) -> str:
    return re.sub(r"[^A-Za-z0-9_]+", "_", str(part)).strip("_") or "x"


class _ModelWriter:
    def __init__(self, name: str):
        self.name = name
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.pairs: list[tuple[VarKey, str]] = []
        self._used: set[str] = set()

    def _unique(self, base: str) -> str:
        candidate, suffix = base, 1
        while candidate in self._used:
            suffix += 1
            candidate = f"{base}_{suffix}"
        self._used.add(candidate)
        return candidate

    def column(self, key: VarKey, prefix: str, *, upper: float | None = None, integer: bool = True, cost: Decimal = Decimal(0)) -> str:
        var_id = self._unique("_".join([prefix, *(_safe(part) for part in key.index)]))
        self.variables.append(Variable(var_id, 0.0, upper, integer, float(to_money(cost))))
        self.pairs.append((key, var_id))
        return var_id

    def row(self, family: str, parts: Iterable[str], terms: Iterable[tuple[str, float]], sense: Sense, rhs: float = 0.0) -> str:
        merged: dict[str, float] = {}
        for var_id, coef in terms:
            merged[var_id] = merged.get(var_id, 0.0) + coef
        row_id = self._unique("_".join([family, *(_safe(part) for part in parts)]))
        kept = tuple((var_id, coef) for var_id, coef in merged.items() if coef != 0)
        self.constraints.append(Constraint(row_id, kept, sense, float(rhs), family))
        return row_id

    def finish(self, formulation: Formulation, instance: Instance, catalog: BlockCatalog) -> BuiltModel:
        model = ModelSpec(self.name, tuple(self.variables), tuple(self.constraints))
        built = BuiltModel(model, VariableRegistry(tuple(self.pairs)), formulation, instance.fingerprint(), catalog.fingerprint())
        logger.info("Built %s: %d columns, %d rows", self.name, len(model.variables), len(model.constraints))
        return built


def _require(mapping, key, index_set: str):
    try:
        return mapping[key]
    except KeyError:
        raise ModelBuildError(index_set, f"missing index set {index_set} entry for {key}") from None


def flow_cost(instance: Instance, block: BlockPath, late_minutes: int) -> Decimal:
    return car_cost(instance, block) + instance.costs.c_late * late_minutes


def car_cost(instance: Instance, block: BlockPath) -> Decimal:
    costs = instance.costs
    return costs.c_wait * block.transfer_wait + costs.c_bord * block.border_crossings + costs.c_km * Decimal(str(block.distance))


def allocation_cost(instance: Instance, railcar: RailcarType) -> Decimal:
    return instance.costs.c_alloc * railcar.platform_count


class _Common:
    """Design and flow columns shared by all three formulations."""

    def __init__(self, writer: _ModelWriter, instance: Instance, catalog: BlockCatalog, network: TimeSpaceNetwork):
        self.writer = writer
        self.instance = instance
        self.catalog = catalog
        self.network = network
        self.s: dict[str, str] = {}
        self.y: dict[str, str] = {}
        self.z: dict[tuple[str, str], str] = {}
        self.unmet: dict[str, str] = {}

    def design_and_flow(self) -> None:
        writer, instance, catalog = self.writer, self.instance, self.catalog
        for service in instance.extra_services:
            self.s[service.id] = writer.column(
                VarKey(VarKind.EXTRA, (service.id,)), "s", upper=1, cost=instance.extra_service_cost(service)
            )
        for block in catalog.blocks:
            self.y[block.id] = writer.column(VarKey(VarKind.BLOCK, (block.id,)), "y", upper=1, cost=block.build_cost)
        for demand in instance.demands:
            for block_id in _require(catalog.blocks_for_demand, demand.id, "B_k"):
                block = catalog.block(block_id)
                late = _require(catalog.lateness, (block_id, demand.id), "lateness")
                self.z[(block_id, demand.id)] = writer.column(
                    VarKey(VarKind.FLOW, (block_id, demand.id)),
                    "zbk",
                    upper=demand.volume,
                    cost=flow_cost(instance, block, late),
                )
            self.unmet[demand.id] = writer.column(
                VarKey(VarKind.UNMET, (demand.id,)), "zk", upper=demand.volume, cost=instance.outsourcing_cost(demand)
            )

    def demand_rows(self) -> None:
        writer, instance, catalog = self.writer, self.instance, self.catalog
        for demand in instance.demands:
            blocks = catalog.blocks_for_demand[demand.id]
            terms = [(self.z[(block_id, demand.id)], 1.0) for block_id in blocks]
            terms.append((self.unmet[demand.id], 1.0))
            writer.row("demand_cover", [demand.id], terms, Sense.EQ, demand.volume)
            for block_id in blocks:
                writer.row(
                    "block_link",
                    [block_id, demand.id],
                    [(self.z[(block_id, demand.id)], 1.0), (self.y[block_id], -float(demand.volume))],
                    Sense.LE,
                )

    def demands_of(self, block: BlockPath):
        return [self.instance.demand(demand_id) for demand_id in _require(self.catalog.demands_for_block, block.id, "K_b")]

    def capacity_rows(self, usage: dict[str, list[tuple[str, float]]]) -> None:
        """Leg capacity, extra-train capacity and minimum-load rows from per-block length terms."""
        writer, instance, catalog = self.writer, self.instance, self.catalog
        for service in instance.services:
            min_legs = set(service.min_load_leg_indices()) if service.is_extra else set()
            for leg_index, leg in enumerate(service.legs):
                arc_id = self.network.moving_arc_id(service.id, leg_index)
                terms = [term for block_id in catalog.blocks_on_arc.get(arc_id, ()) for term in usage[block_id]]
                if not service.is_extra:
                    if terms:
                        writer.row("leg_capacity", [service.id, str(leg_index)], terms, Sense.LE, leg.capacity)
                    continue
                selector = self.s[service.id]
                writer.row(
                    "extra_capacity",
                    [service.id, str(leg_index)],
                    terms + [(selector, -float(leg.capacity))],
                    Sense.LE,
                )
                if leg_index in min_legs:
                    writer.row(
                        "extra_min_load",
                        [service.id, str(leg_index)],
                        terms + [(selector, -service.min_load_fraction * leg.capacity)],
                        Sense.GE,
                    )


def _railcars(instance: Instance) -> tuple[RailcarType, ...]:
    if not instance.railcars:
        raise ModelBuildError("railcar types")
    return instance.railcars


def _loading(common: _Common, x: dict[tuple[str, str], str]) -> None:
    """Loaded-car columns, loading patterns and the rows tying them to container flow."""
    writer, instance = common.writer, common.instance
    railcars = _railcars(instance)
    platforms = sorted({car.platform_type for car in railcars}, key=lambda p: p.value)
    for block in common.catalog.blocks:
        demands = common.demands_of(block)
        if not demands:
            continue
        for car in railcars:
            x[(block.id, car.id)] = writer.column(
                VarKey(VarKind.LOADED_CARS, (block.id, car.id)), "x", upper=block.capacity // car.car_length
            )
        present = {demand.container_type for demand in demands}
        volume = sum(demand.volume for demand in demands)
        patterns: dict[LoadPattern, str] = {}
        for platform in platforms:
            for pattern in ALLOWED_PATTERNS[platform]:
                if not set(pattern.containers) <= present:
                    continue
                if pattern.is_pair:
                    key = VarKey(VarKind.PAIR_LOAD, (block.id, platform.value, *(c.value for c in pattern.containers)))
                    patterns[pattern] = writer.column(key, "nup", upper=volume)
                else:
                    key = VarKey(VarKind.SINGLE_LOAD, (block.id, platform.value, pattern.containers[0].value))
                    patterns[pattern] = writer.column(key, "nus", upper=volume)

        for container in sorted(present, key=lambda c: c.length):
            terms = [
                (common.z[(block.id, demand.id)], 1.0) for demand in demands if demand.container_type is container
            ]
            terms += [(var_id, -float(pattern.count(container))) for pattern, var_id in patterns.items() if pattern.count(container)]
            writer.row("load_count", [block.id, container.value], terms, Sense.EQ)

        for platform in platforms:
            used = [(var_id, 1.0) for pattern, var_id in patterns.items() if pattern.platform is platform]
            cars = [car for car in railcars if car.platform_type is platform]
            writer.row(
                "platform_upper",
                [block.id, platform.value],
                used + [(x[(block.id, car.id)], -float(car.platform_count)) for car in cars],
                Sense.LE,
            )
            writer.row(
                "platform_lower",
                [block.id, platform.value],
                [(x[(block.id, car.id)], 1.0) for car in cars] + [(var_id, -coef) for var_id, coef in used],
                Sense.LE,
            )

        mixed = patterns.get(_pattern(PlatformType.P40, T40, T53))
        if mixed is not None:
            terms = [(x[(block.id, car.id)], float(mixed_top_coefficient(car))) for car in railcars if mixed_top_coefficient(car)]
            writer.row("mixed_top", [block.id], terms + [(mixed, -1.0)], Sense.GE)


def _fleet(common: _Common, x: dict[tuple[str, str], str], empty: dict[tuple[str, str], str]) -> None:
    """Initial allocation, pool inventories and the balance rows around each terminal's pool cycle."""
    writer, instance, catalog, network = common.writer, common.instance, common.catalog, common.network

    def moved(block_id: str, car_id: str) -> list[tuple[str, float]]:
        terms = [(empty[(block_id, car_id)], 1.0)]
        if (block_id, car_id) in x:
            terms.append((x[(block_id, car_id)], 1.0))
        return terms

    for car in _railcars(instance):
        allocations = []
        for terminal in instance.terminals:
            chain = network.pool_sequence.get(terminal.id, ())
            if not chain:
                continue
            limits = [value for value in (car.fleet_limit, car.terminal_limits.get(terminal.id)) if value is not None]
            allocation = writer.column(
                VarKey(VarKind.ALLOCATION, (car.id, terminal.id)),
                "wt",
                upper=min(limits) if limits else None,
                cost=allocation_cost(instance, car),
            )
            allocations.append(allocation)
            pools = {
                node_id: writer.column(
                    VarKey(VarKind.POOL, (car.id, terminal.id, node_id)), "wp", upper=car.fleet_limit
                )
                for node_id in chain
            }
            for position, node_id in enumerate(chain):
                node = network.nodes[node_id]
                terms = [(pools[chain[position - 1]], 1.0), (pools[node_id], -1.0)]
                if node.kind is NodeKind.POOLPLUS:
                    for block_id in catalog.arriving_at_pool.get(node_id, ()):
                        terms += moved(block_id, car.id)
                else:
                    for block_id in catalog.departing_at_pool.get(node_id, ()):
                        terms += [(var_id, -coef) for var_id, coef in moved(block_id, car.id)]
                writer.row("pool_balance", [car.id, node_id], terms, Sense.EQ)

            terms = [(allocation, 1.0), (pools[chain[-1]], -1.0)]
            for block_id in catalog.wraparound_blocks.get(terminal.id, ()):
                terms += [(var_id, -coef) for var_id, coef in moved(block_id, car.id)]
            writer.row("fleet_count", [car.id, terminal.id], terms, Sense.EQ)
            if terminal.id in car.terminal_limits:
                writer.row(
                    "terminal_cap", [car.id, terminal.id], [(allocation, 1.0)], Sense.LE, car.terminal_limits[terminal.id]
                )
        if car.fleet_limit is not None and allocations:
            writer.row("fleet_cap", [car.id], [(var_id, 1.0) for var_id in allocations], Sense.LE, car.fleet_limit)


def build_ssndrm(instance: Instance, catalog: BlockCatalog, network: TimeSpaceNetwork) -> BuiltModel:
    writer = _ModelWriter("ssndrm")
    common = _Common(writer, instance, catalog, network)
    common.design_and_flow()
    x: dict[tuple[str, str], str] = {}
    _loading(common, x)
    empty: dict[tuple[str, str], str] = {}
    for block in catalog.blocks:
        unit_cost = car_cost(instance, block)
        for car in _railcars(instance):
            empty[(block.id, car.id)] = writer.column(
                VarKey(VarKind.EMPTY_CARS, (block.id, car.id)),
                "wb",
                upper=block.capacity // car.car_length,
                cost=unit_cost,
            )
    common.demand_rows()
    usage = _car_usage(instance, catalog, x, empty)
    _block_length_rows(common, usage)
    _fleet(common, x, empty)
    common.capacity_rows(usage)
    return writer.finish(Formulation.SSNDRM, instance, catalog)


def build_unrestricted_fleet(instance: Instance, catalog: BlockCatalog, network: TimeSpaceNetwork) -> BuiltModel:
    writer = _ModelWriter("uf")
    common = _Common(writer, instance, catalog, network)
    common.design_and_flow()
    x: dict[tuple[str, str], str] = {}
    _loading(common, x)
    common.demand_rows()
    usage = _car_usage(instance, catalog, x, {})
    _block_length_rows(common, usage)
    common.capacity_rows(usage)
    return writer.finish(Formulation.UNRESTRICTED_FLEET, instance, catalog)


def build_unrestricted_loading(instance: Instance, catalog: BlockCatalog, network: TimeSpaceNetwork) -> BuiltModel:
    writer = _ModelWriter("ul")
    common = _Common(writer, instance, catalog, network)
    common.design_and_flow()
    common.demand_rows()
    usage: dict[str, list[tuple[str, float]]] = {}
    for block in catalog.blocks:
        usage[block.id] = [
            (common.z[(block.id, demand.id)], demand.container_type.length / 2)
            for demand in common.demands_of(block)
        ]
    _block_length_rows(common, usage)
    common.capacity_rows(usage)
    return writer.finish(Formulation.UNRESTRICTED_LOADING, instance, catalog)


def _car_usage(instance: Instance, catalog: BlockCatalog, x: dict, empty: dict) -> dict[str, list[tuple[str, float]]]:
    usage: dict[str, list[tuple[str, float]]] = {}
    for block in catalog.blocks:
        terms = []
        for car in instance.railcars:
            for columns in (x, empty):
                var_id = columns.get((block.id, car.id))
                if var_id is not None:
                    terms.append((var_id, float(car.car_length)))
        usage[block.id] = terms
    return usage


def _block_length_rows(common: _Common, usage: dict[str, list[tuple[str, float]]]) -> None:
    for block in common.catalog.blocks:
        terms = usage[block.id] + [(common.y[block.id], -float(block.capacity))]
        common.writer.row("block_length", [block.id], terms, Sense.LE)


BUILDERS = {
    Formulation.SSNDRM: build_ssndrm,
    Formulation.UNRESTRICTED_FLEET: build_unrestricted_fleet,
    Formulation.UNRESTRICTED_LOADING: build_unrestricted_loading,
}


def build_model(formulation: Formulation | str, instance: Instance, catalog: BlockCatalog, network: TimeSpaceNetwork) -> BuiltModel:
    return BUILDERS[Formulation(formulation)](instance, catalog, network)
