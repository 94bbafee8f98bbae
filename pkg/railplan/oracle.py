"""Exhaustive references for tiny instances.

``slot_loading_feasible`` places containers slot by slot on physical cars;
``counting_feasible`` answers the same question with the pattern counts the
formulations use. ``brute_force_optimum`` enumerates whole plans and evaluates
every physical rule directly, so agreement with a solver is evidence rather
than a restatement of the model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from functools import lru_cache
from itertools import combinations_with_replacement, product
from typing import Iterable, Iterator, Mapping

from joblib import Parallel, delayed

from .blocks import BlockCatalog, BlockPath
from .errors import OracleRefusal
from .instance import ContainerType, Instance, PlatformType, RailcarType
from .milp import VarKey, VarKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TinyBounds:
    max_terminals: int = 3
    max_services: int = 3
    max_blocks: int = 12
    max_volume: int = 6
    max_fleet: int = 4
    max_extras: int = 1
    max_states: int = 2_000_000


# (40-ft count, 53-ft count, 53-ft containers on top) per platform
PLATFORM_LOADS: dict[PlatformType, tuple[tuple[int, int, int], ...]] = {
    PlatformType.P40: ((0, 0, 0), (1, 0, 0), (2, 0, 0), (1, 1, 1)),
    PlatformType.P53: ((0, 0, 0), (1, 0, 0), (0, 1, 0), (2, 0, 0), (1, 1, 0), (0, 2, 0)),
}


def top53_limit(platform: PlatformType, platform_count: int) -> int:
    if platform is PlatformType.P53:
        return 2 * platform_count
    return math.ceil(platform_count / 2)


@lru_cache(maxsize=None)
def car_states(platform: PlatformType, platform_count: int, loaded: bool = False) -> frozenset[tuple[int, int]]:
    """Every (40-ft, 53-ft) load one car can physically hold."""
    limit = top53_limit(platform, platform_count)
    states = set()
    for platforms in combinations_with_replacement(PLATFORM_LOADS[platform], platform_count):
        n40 = sum(p[0] for p in platforms)
        n53 = sum(p[1] for p in platforms)
        if sum(p[2] for p in platforms) > limit:
            continue
        if loaded and n40 + n53 == 0:
            continue
        states.add((n40, n53))
    return frozenset(states)


def _target(containers: Mapping[ContainerType, int]) -> tuple[int, int]:
    return containers.get(ContainerType.T40, 0), containers.get(ContainerType.T53, 0)


def slot_loading_feasible(
    containers: Mapping[ContainerType, int], railcars: Iterable[RailcarType], all_loaded: bool = False
) -> bool:
    """True iff the containers fit on the cars slot by slot; with ``all_loaded`` every car must carry one."""
    n40, n53 = _target(containers)
    reachable = {(0, 0)}
    for car in railcars:
        states = car_states(car.platform_type, car.platform_count, all_loaded)
        reachable = {
            (a + b, c + d)
            for a, c in reachable
            for b, d in states
            if a + b <= n40 and c + d <= n53
        }
        if not reachable:
            return False
    return (n40, n53) in reachable


def _overlaps(low: int, high: int, floor: int, ceiling: int) -> bool:
    return low <= high and max(low, floor) <= min(high, ceiling)


def _patterns_exist(n40: int, n53: int, cars: Mapping[PlatformType, int], platforms: Mapping[PlatformType, int], room: int) -> bool:
    for mixed40 in range(min(n40, n53, room) + 1):
        for mixed53 in range(min(n40 - mixed40, n53 - mixed40) + 1):
            left53 = n53 - mixed40 - mixed53
            for pairs53 in range(left53 // 2 + 1):
                singles53 = left53 - 2 * pairs53
                left40 = n40 - mixed40 - mixed53
                fixed53 = mixed53 + pairs53 + singles53
                for on40 in range(left40 + 1):
                    on53 = left40 - on40
                    if not _overlaps(
                        mixed40 + math.ceil(on40 / 2), mixed40 + on40,
                        cars[PlatformType.P40], platforms[PlatformType.P40],
                    ):
                        continue
                    if _overlaps(
                        fixed53 + math.ceil(on53 / 2), fixed53 + on53,
                        cars[PlatformType.P53], platforms[PlatformType.P53],
                    ):
                        return True
    return False


def counting_feasible(containers: Mapping[ContainerType, int], railcars: Iterable[RailcarType]) -> bool:
    """True iff loaded-car counts and loading-pattern counts satisfy the block-level counting rows."""
    n40, n53 = _target(containers)
    groups: dict[str, tuple[RailcarType, int]] = {}
    for car in railcars:
        known, count = groups.get(car.id, (car, 0))
        groups[car.id] = (known, count + 1)
    types = [car for car, _ in groups.values()]
    for loaded in product(*(range(count + 1) for _, count in groups.values())):
        cars = dict.fromkeys(PlatformType, 0)
        platforms = dict.fromkeys(PlatformType, 0)
        room = 0
        for car, x in zip(types, loaded):
            cars[car.platform_type] += x
            platforms[car.platform_type] += car.platform_count * x
            if car.platform_type is PlatformType.P40:
                room += math.ceil(car.platform_count / 2) * x
        if _patterns_exist(n40, n53, cars, platforms, room):
            return True
    return False


@dataclass(frozen=True)
class OracleResult:
    objective: float
    assignment: dict[VarKey, float]
    states: int = field(default=0, compare=False)


def check_bounds(instance: Instance, catalog: BlockCatalog, bounds: TinyBounds) -> None:
    problems = []
    if len(instance.terminals) > bounds.max_terminals:
        problems.append(f"{len(instance.terminals)} terminals")
    if len(instance.regular_services) > bounds.max_services:
        problems.append(f"{len(instance.regular_services)} services")
    if len(instance.extra_services) > bounds.max_extras:
        problems.append(f"{len(instance.extra_services)} extra candidates")
    if len(catalog.blocks) > bounds.max_blocks:
        problems.append(f"{len(catalog.blocks)} blocks")
    volume = sum(d.volume for d in instance.demands)
    if volume > bounds.max_volume:
        problems.append(f"total volume {volume}")
    for car in instance.railcars:
        if car.fleet_limit is None:
            problems.append(f"unbounded fleet of {car.id}")
        elif car.fleet_limit > bounds.max_fleet:
            problems.append(f"fleet of {car.id} is {car.fleet_limit}")
    if problems:
        raise OracleRefusal(f"instance exceeds tiny bounds: {', '.join(problems)}")


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first, *rest)


class _Search:
    """Depth-first enumeration over blocks with cost pruning."""

    def __init__(self, instance: Instance, catalog: BlockCatalog, bounds: TinyBounds):
        self.instance = instance
        self.catalog = catalog
        self.bounds = bounds
        self.cars = instance.railcars
        self.fleet = tuple(car.fleet_limit for car in self.cars)
        self.states = 0
        self.events = self._event_positions()
        costs = instance.costs
        self.car_cost = {
            b.id: costs.c_wait * b.transfer_wait + costs.c_bord * b.border_crossings + costs.c_km * Decimal(str(b.distance))
            for b in catalog.blocks
        }
        self._loaded_cache: dict[tuple[int, int], list[tuple[int, ...]]] = {}

    def _event_positions(self) -> dict[tuple[str, int], tuple[str, int]]:
        """Position of every stop event in its terminal's arrivals-first event order."""
        order: dict[str, list[tuple[int, int, str, int]]] = {}
        for service in self.instance.services:
            for index, stop in enumerate(service.stops):
                if stop.arrival is not None:
                    order.setdefault(stop.terminal, []).append((stop.arrival, 0, service.id, index))
                if stop.departure is not None:
                    order.setdefault(stop.terminal, []).append((stop.departure, 1, service.id, index))
        positions = {}
        for terminal, events in order.items():
            for position, (_, is_departure, service_id, index) in enumerate(sorted(events)):
                positions[(service_id, index, is_departure)] = (terminal, position)
        return positions

    def tick(self) -> None:
        self.states += 1
        if self.states > self.bounds.max_states:
            raise OracleRefusal(f"enumeration exceeded {self.bounds.max_states} states")

    def loaded_options(self, n40: int, n53: int) -> list[tuple[int, ...]]:
        key = (n40, n53)
        if key not in self._loaded_cache:
            options = []
            for counts in product(*(range(limit + 1) for limit in self.fleet)):
                if sum(counts) == 0:
                    continue
                multiset = [car for car, count in zip(self.cars, counts) for _ in range(count)]
                if slot_loading_feasible({ContainerType.T40: n40, ContainerType.T53: n53}, multiset, all_loaded=True):
                    options.append(counts)
            self._loaded_cache[key] = options
        return self._loaded_cache[key]

    def block_options(self, block: BlockPath, carried: tuple[int, int], usable: bool):
        """(loaded, empty, cost, length) choices for one block."""
        zero = tuple(0 for _ in self.cars)
        if not usable:
            return [(zero, zero, Decimal(0), 0.0)] if carried == (0, 0) else []
        loaded_choices = [zero] if carried == (0, 0) else self.loaded_options(*carried)
        options = []
        build = self.instance.costs.c_build + self.instance.costs.c_trans * block.transfers
        for loaded in loaded_choices:
            for empty in product(*(range(limit - x + 1) for limit, x in zip(self.fleet, loaded))):
                length = sum(car.car_length * (x + w) for car, x, w in zip(self.cars, loaded, empty))
                if length > block.capacity:
                    continue
                used = sum(loaded) + sum(empty) > 0
                if not used:
                    options.append((loaded, empty, Decimal(0), 0.0))
                    continue
                cost = build + self.car_cost[block.id] * sum(empty)
                options.append((loaded, empty, cost, length))
        return options

    def fleet_cost(self, plan: list[tuple[BlockPath, tuple[int, ...], tuple[int, ...]]]):
        """Minimal initial allocation per (car, terminal) keeping every inventory non-negative, or None."""
        period = self.instance.period
        allocation: dict[tuple[str, str], int] = {}
        for index, car in enumerate(self.cars):
            net: dict[str, dict[int, int]] = {}
            in_transit: dict[str, int] = {}
            for block, loaded, empty in plan:
                moved = loaded[index] + empty[index]
                if not moved:
                    continue
                first_service, first_leg = block.legs[0]
                last_service, last_leg = block.legs[-1]
                origin, out_at = self.events[(first_service, first_leg, 1)]
                destination, in_at = self.events[(last_service, last_leg + 1, 0)]
                net.setdefault(origin, {}).setdefault(out_at, 0)
                net[origin][out_at] -= moved
                net.setdefault(destination, {}).setdefault(in_at, 0)
                net[destination][in_at] += moved
                if block.departure + block.duration >= period:
                    in_transit[origin] = in_transit.get(origin, 0) + moved
            total = 0
            for terminal in sorted(set(net) | set(in_transit)):
                stock = lowest = 0
                for position in sorted(net.get(terminal, {})):
                    stock += net[terminal][position]
                    lowest = min(lowest, stock)
                if stock != 0:
                    return None
                count = -lowest + in_transit.get(terminal, 0)
                limit = car.terminal_limits.get(terminal)
                if limit is not None and count > limit:
                    return None
                if count:
                    allocation[(car.id, terminal)] = count
                total += count
            if total > car.fleet_limit:
                return None
        cost = sum(
            (self.instance.costs.c_alloc * self.instance.railcar(car_id).platform_count * count for (car_id, _), count in allocation.items()),
            Decimal(0),
        )
        return cost, allocation


def _leg_capacities(instance: Instance, selected_extras: set[str]) -> dict[tuple[str, int], float]:
    capacities = {}
    for service in instance.services:
        open_ = not service.is_extra or service.id in selected_extras
        for index, leg in enumerate(service.legs):
            capacities[(service.id, index)] = leg.capacity if open_ else 0.0
    return capacities


def _search_selection(instance: Instance, catalog: BlockCatalog, bounds: TinyBounds, selected: tuple[str, ...]):
    search = _Search(instance, catalog, bounds)
    selected_set = set(selected)
    capacities = _leg_capacities(instance, selected_set)
    blocks = catalog.blocks
    extra_cost = sum((instance.extra_service_cost(instance.service(s)) for s in selected), Decimal(0))
    demands = instance.demands
    best: list = [None]

    for split in product(*(_compositions(d.volume, len(catalog.blocks_for_demand.get(d.id, ())) + 1) for d in demands)):
        search.tick()
        flows: dict[tuple[str, str], int] = {}
        carried = {b.id: [0, 0] for b in blocks}
        cost = extra_cost
        for demand, parts in zip(demands, split):
            block_ids = catalog.blocks_for_demand.get(demand.id, ())
            cost += instance.outsourcing_cost(demand) * parts[-1]
            for block_id, amount in zip(block_ids, parts):
                if not amount:
                    continue
                flows[(block_id, demand.id)] = amount
                late = catalog.lateness.get((block_id, demand.id), 0)
                cost += (search.car_cost[block_id] + instance.costs.c_late * late) * amount
                carried[block_id][0 if demand.container_type is ContainerType.T40 else 1] += amount
        if best[0] is not None and cost >= best[0][0]:
            continue
        choices = []
        feasible = True
        for block in blocks:
            usable = all(capacities[leg] > 0 for leg in block.legs)
            options = search.block_options(block, tuple(carried[block.id]), usable)
            if not options:
                feasible = False
                break
            choices.append(sorted(options, key=lambda option: option[2]))
        if not feasible:
            continue
        _descend(search, instance, blocks, choices, capacities, selected, 0, cost, {}, [], flows, split, best)
    return best[0], search.states


def _descend(search, instance, blocks, choices, capacities, selected, depth, cost, loads, plan, flows, split, best):
    if best[0] is not None and cost >= best[0][0]:
        return
    if depth == len(blocks):
        search.tick()
        for service_id in selected:
            service = instance.service(service_id)
            for index in service.min_load_leg_indices():
                if loads.get((service_id, index), 0.0) < service.min_load_fraction * service.legs[index].capacity - 1e-9:
                    return
        fleet = search.fleet_cost(plan)
        if fleet is None:
            return
        allocation_cost, allocation = fleet
        total = cost + allocation_cost
        if best[0] is None or total < best[0][0]:
            best[0] = (total, list(plan), dict(flows), split, allocation)
        return
    block = blocks[depth]
    for loaded, empty, extra, length in choices[depth]:
        if best[0] is not None and cost + extra >= best[0][0]:
            break
        updated = dict(loads)
        fits = True
        for leg in block.legs:
            updated[leg] = updated.get(leg, 0.0) + length
            if updated[leg] > capacities[leg] + 1e-9:
                fits = False
        if not fits:
            continue
        _descend(
            search, instance, blocks, choices, capacities, selected, depth + 1, cost + extra,
            updated, plan + [(block, loaded, empty)], flows, split, best,
        )


def _assignment(instance: Instance, catalog: BlockCatalog, selected: tuple[str, ...], found) -> dict[VarKey, float]:
    _, plan, flows, split, allocation = found
    values: dict[VarKey, float] = {}
    for service in instance.extra_services:
        values[VarKey(VarKind.EXTRA, (service.id,))] = 1.0 if service.id in selected else 0.0
    for block, loaded, empty in plan:
        used = sum(loaded) + sum(empty) > 0 or any(b == block.id for b, _ in flows)
        values[VarKey(VarKind.BLOCK, (block.id,))] = 1.0 if used else 0.0
        for car, x, w in zip(instance.railcars, loaded, empty):
            if x:
                values[VarKey(VarKind.LOADED_CARS, (block.id, car.id))] = float(x)
            if w:
                values[VarKey(VarKind.EMPTY_CARS, (block.id, car.id))] = float(w)
    for (block_id, demand_id), amount in flows.items():
        values[VarKey(VarKind.FLOW, (block_id, demand_id))] = float(amount)
    for demand, parts in zip(instance.demands, split):
        values[VarKey(VarKind.UNMET, (demand.id,))] = float(parts[-1])
    for (car_id, terminal), count in allocation.items():
        values[VarKey(VarKind.ALLOCATION, (car_id, terminal))] = float(count)
    return values


def brute_force_optimum(
    instance: Instance, catalog: BlockCatalog, bounds: TinyBounds | None = None, n_jobs: int = 1
) -> OracleResult:
    """Cheapest plan found by exhaustive enumeration of extra trains, container splits and car assignments."""
    bounds = bounds or TinyBounds()
    check_bounds(instance, catalog, bounds)
    extras = [service.id for service in instance.extra_services]
    selections = [tuple(e for e, on in zip(extras, flags) if on) for flags in product((0, 1), repeat=len(extras))]
    if n_jobs == 1:
        outcomes = [_search_selection(instance, catalog, bounds, s) for s in selections]
    else:
        outcomes = Parallel(n_jobs=n_jobs)(delayed(_search_selection)(instance, catalog, bounds, s) for s in selections)
    best = None
    states = 0
    for selection, (found, explored) in zip(selections, outcomes):
        states += explored
        if found is not None and (best is None or found[0] < best[1][0]):
            best = (selection, found)
    if best is None:
        raise OracleRefusal("no feasible plan exists within the enumerated space")
    selection, found = best
    logger.info("Oracle optimum %s after %d states", found[0], states)
    return OracleResult(float(found[0]), _assignment(instance, catalog, selection, found), states)
