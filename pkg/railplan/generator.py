"""Seeded instance generation: synthetic schedules, demand draws, fleet scenarios and extra-train candidates."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from decimal import Decimal
from pathlib import Path

import numpy as np

from .errors import GeneratorError, ReportError, ScenarioError
from .instance import (
    ContainerType,
    Demand,
    Instance,
    Leg,
    PlanningConfig,
    ServiceKind,
    Stop,
    Terminal,
    TrainService,
    default_railcar_catalog,
    validate_instance,
)
from .network import UNREACHABLE, build_network, shortest_path_time

logger = logging.getLogger(__name__)

EXTRA_SUFFIX = "+X"
DEFAULT_MIN_LOAD = 0.5


@dataclass(frozen=True)
class FleetScenario:
    id: int
    label: str
    railcar_ids: tuple[str, ...]


FLEET_SCENARIOS: dict[int, FleetScenario] = {
    scenario.id: scenario
    for scenario in (
        FleetScenario(1, "1x53", ("1x53",)),
        FleetScenario(2, "1x40, 1x53", ("1x40", "1x53")),
        FleetScenario(3, "3x53", ("3x53",)),
        FleetScenario(4, "3x40, 3x53", ("3x40", "3x53")),
        FleetScenario(5, "5x53", ("5x53",)),
        FleetScenario(6, "5x40, 5x53", ("5x40", "5x53")),
        FleetScenario(7, "All", ("1x40", "3x40", "5x40", "1x53", "3x53", "5x53")),
    )
}


def fleet_scenario(scenario_id: int) -> FleetScenario:
    try:
        return FLEET_SCENARIOS[int(scenario_id)]
    except (KeyError, ValueError):
        raise ScenarioError(f"unknown fleet scenario {scenario_id!r}; expected 1-7") from None


@dataclass(frozen=True)
class SizeParams:
    """Shape of a synthetic schedule. ``services`` counts trains per cycle."""

    terminals: int = 5
    services: int = 6
    max_legs: int = 3
    regions: int = 2
    capacity_range: tuple[int, int] = (6000, 9000)
    distance_range: tuple[float, float] = (200.0, 900.0)
    speed_kmh: float = 60.0
    dwell_range: tuple[int, int] = (60, 240)
    transfer_time: int = 120
    schedule_length: int = 10080


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 0
    od_volumes: tuple[tuple[str, str, int], ...] | None = None
    od_pairs: int | None = None
    volume_range: tuple[int, int] = (2, 12)
    share_range: tuple[float, float] = (0.0, 1.0)
    due_slack: float = 1.5
    fleet_limit: int | None = None


def split_volume(total: int, share40: float) -> tuple[int, int]:
    """Round the 40-ft count half-down; the residual container goes to the 53-ft side."""
    n40 = max(0, min(total, math.ceil(share40 * total - 0.5)))
    return n40, total - n40


def generate_synthetic_network(size: SizeParams, seed: int) -> Instance:
    if size.terminals < 2:
        raise GeneratorError("a schedule needs at least two terminals")
    if size.services < 1:
        raise GeneratorError("a schedule needs at least one service")
    max_legs = min(size.max_legs, size.terminals - 1)
    if max_legs < 1 or size.services * max_legs < size.terminals - 1:
        raise GeneratorError(
            f"{size.services} services of at most {max_legs} legs cannot touch {size.terminals} terminals"
        )
    rng = np.random.default_rng(seed)
    period = size.schedule_length
    terminals = tuple(
        Terminal(id=f"T{index + 1:02d}", name=f"Terminal {index + 1}", region=f"R{index % size.regions + 1}")
        for index in range(size.terminals)
    )
    low, high = size.distance_range
    distances = np.round(rng.uniform(low, high, size=(size.terminals, size.terminals)), 1)
    distances = np.triu(distances, 1) + np.triu(distances, 1).T

    legs_per_service = [int(n) for n in rng.integers(1, max_legs + 1, size=size.services)]
    position = 0
    while sum(legs_per_service) < size.terminals - 1:
        if legs_per_service[position] < max_legs:
            legs_per_service[position] += 1
        position = (position + 1) % size.services

    services = []
    cursor = 0
    for index, leg_count in enumerate(legs_per_service):
        route = [(cursor + step) % size.terminals for step in range(leg_count + 1)]
        cursor += leg_count
        if index % 2:
            route.reverse()
        clock = int(rng.integers(0, period))
        elapsed = 0
        stops, legs = [], []
        for hop, terminal in enumerate(route):
            arrival = None
            if hop > 0:
                distance = float(distances[route[hop - 1], terminal])
                minutes = max(1, math.ceil(distance / size.speed_kmh * 60))
                elapsed += minutes
                clock = (clock + minutes) % period
                arrival = clock
                legs.append(Leg(capacity=int(rng.integers(size.capacity_range[0], size.capacity_range[1] + 1)), distance=distance))
            departure = None
            if hop < len(route) - 1:
                if hop > 0:
                    dwell = int(rng.integers(size.dwell_range[0], size.dwell_range[1] + 1))
                    elapsed += dwell
                    clock = (clock + dwell) % period
                departure = clock
            stops.append(Stop(terminal=terminals[terminal].id, arrival=arrival, departure=departure))
        if elapsed >= period:
            raise GeneratorError(f"service S{index + 1:02d} runs longer than one cycle")
        services.append(TrainService(id=f"S{index + 1:02d}", stops=tuple(stops), legs=tuple(legs)))

    instance = Instance(
        terminals=terminals,
        services=tuple(services),
        railcars=default_railcar_catalog(),
        config=PlanningConfig(schedule_length=period, transfer_time=size.transfer_time),
    )
    touched = {stop.terminal for service in instance.services for stop in service.stops}
    if touched != {terminal.id for terminal in terminals}:
        raise GeneratorError("generated schedule leaves a terminal untouched")
    logger.info("Generated synthetic schedule: %d terminals, %d services (seed %d)", size.terminals, size.services, seed)
    return instance


def _od_volumes(base: Instance, spec: GeneratorSpec, rng: np.random.Generator) -> list[tuple[str, str, int]]:
    if spec.od_volumes is not None:
        for origin, destination, total in spec.od_volumes:
            if total <= 0:
                raise GeneratorError(f"OD total for {origin}->{destination} must be positive")
        return sorted(spec.od_volumes)
    ids = sorted(terminal.id for terminal in base.terminals)
    pairs = [(o, d) for o in ids for d in ids if o != d]
    count = min(len(pairs), spec.od_pairs or 2 * len(ids))
    chosen = sorted(int(i) for i in rng.choice(len(pairs), size=count, replace=False))
    low, high = spec.volume_range
    return [(pairs[i][0], pairs[i][1], int(rng.integers(low, high + 1))) for i in chosen]


def generate_demands(base: Instance, spec: GeneratorSpec) -> Instance:
    """Draw per-OD container-type mixes, releases and due times; totals per OD are kept exactly."""
    rng = np.random.default_rng(spec.seed)
    period = base.period
    network = build_network(base)
    demands = []
    for origin, destination, total in _od_volumes(base, spec, rng):
        share = float(rng.uniform(*spec.share_range))
        release = int(rng.integers(0, period))
        counts = dict(zip((ContainerType.T40, ContainerType.T53), split_volume(total, share)))
        window_check = Demand(
            id="window-check", origin=origin, destination=destination, release=release,
            due=(release + period - 1) % period, volume=total, container_type=ContainerType.T40,
        )
        shortest = shortest_path_time(network, window_check)
        if shortest == UNREACHABLE:
            logger.warning("No scheduled path from %s to %s; demand will only use the artificial arc", origin, destination)
            window = period - 1
        else:
            window = min(math.ceil(spec.due_slack * shortest), period - 1)
        for container, volume in counts.items():
            if volume == 0:
                continue
            demands.append(
                Demand(
                    id=f"{origin}-{destination}-{container.value}",
                    origin=origin,
                    destination=destination,
                    release=release,
                    due=(release + window) % period,
                    volume=volume,
                    container_type=container,
                )
            )
    logger.info("Generated %d demands over %d OD pairs (seed %d)", len(demands), len({(d.origin, d.destination) for d in demands}), spec.seed)
    railcars = base.railcars
    if spec.fleet_limit is not None:
        railcars = tuple(car.model_copy(update={"fleet_limit": spec.fleet_limit}) for car in railcars)
    return base.with_changes(demands=tuple(demands), railcars=railcars)


def apply_fleet_scenario(instance: Instance, scenario_id: int) -> Instance:
    scenario = fleet_scenario(scenario_id)
    known = {car.id: car for car in default_railcar_catalog()}
    known.update({car.id: car for car in instance.railcars})
    limits = {car.fleet_limit for car in instance.railcars}
    shared_limit = limits.pop() if len(limits) == 1 else None
    railcars = []
    for car_id in scenario.railcar_ids:
        car = known[car_id]
        if car_id not in {c.id for c in instance.railcars} and shared_limit is not None:
            car = car.model_copy(update={"fleet_limit": shared_limit})
        railcars.append(car)
    return instance.with_changes(railcars=tuple(railcars))


def extra_clone(service: TrainService, instance: Instance) -> TrainService:
    clone = TrainService(
        id=f"{service.id}{EXTRA_SUFFIX}",
        kind=ServiceKind.EXTRA,
        stops=service.stops,
        legs=service.legs,
        min_load_fraction=DEFAULT_MIN_LOAD,
    )
    return clone.model_copy(update={"fixed_cost": instance.extra_service_cost(clone)})


def duplicate_as_extras(instance: Instance) -> Instance:
    """One extra-train candidate per regular service, same stops and legs."""
    if not instance.services:
        raise GeneratorError("cannot duplicate an empty schedule")
    existing = {service.id for service in instance.services}
    clones = [
        extra_clone(service, instance)
        for service in instance.regular_services
        if f"{service.id}{EXTRA_SUFFIX}" not in existing
    ]
    return instance.with_changes(services=instance.services + tuple(clones))


def strip_extras(instance: Instance) -> Instance:
    return instance.with_changes(services=instance.regular_services)


def generate_instance(size: SizeParams, spec: GeneratorSpec, scenario_id: int | None = None, extras: bool = False) -> Instance:
    instance = generate_demands(generate_synthetic_network(size, spec.seed), spec)
    if scenario_id is not None:
        instance = apply_fleet_scenario(instance, scenario_id)
    if extras:
        instance = duplicate_as_extras(instance)
    report = validate_instance(instance)
    if report.violations:
        raise GeneratorError(f"generated instance is invalid: {report.violations[0]}")
    return instance


def _plain(value):
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    return value


def generation_manifest(instance: Instance, size: SizeParams | None, spec: GeneratorSpec, scenario_id: int | None, extras: bool) -> dict:
    return {
        "seed": spec.seed,
        "size": _plain(asdict(size)) if size is not None else None,
        "spec": _plain(asdict(spec)),
        "scenario": scenario_id,
        "extras": extras,
        "sha256": instance.fingerprint(),
    }


def write_manifest(manifest: dict, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ReportError(path, exc.strerror or str(exc)) from exc
    return path


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
