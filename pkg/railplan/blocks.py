"""Candidate block enumeration and the index sets derived from it."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path

from .instance import Demand, Instance, cyclic_duration, to_money
from .network import ArcKind, NodeKind, TimeSpaceNetwork, event_node_id, shortest_path_time

logger = logging.getLogger(__name__)

LegRef = tuple[str, int]


@dataclass(frozen=True)
class BlockLimits:
    max_transfers: int = 3
    max_elapsed: int | None = None
    od_filter: frozenset[tuple[str, str]] | None = None
    demand_od_only: bool = False


@dataclass(frozen=True)
class BlockPath:
    id: str
    origin: str
    destination: str
    departure: int
    arrival: int
    legs: tuple[LegRef, ...]
    transfer_terminals: tuple[str, ...]
    capacity: int
    transfers: int
    border_crossings: int
    distance: float
    transfer_wait: int
    duration: int
    wraps: bool
    build_cost: Decimal
    uses_extra: bool
    first_event: str
    last_event: str
    moving_arcs: tuple[str, ...]
    handling_arcs: tuple[str, ...]

    @property
    def services(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(service for service, _ in self.legs))

    def to_dict(self) -> dict:
        record = asdict(self)
        record["legs"] = [list(leg) for leg in self.legs]
        record["build_cost"] = str(self.build_cost)
        return record


@dataclass(frozen=True)
class BlockCatalog:
    blocks: tuple[BlockPath, ...]
    blocks_for_demand: dict[str, tuple[str, ...]]
    demands_for_block: dict[str, tuple[str, ...]]
    blocks_on_arc: dict[str, tuple[str, ...]]
    departing_at_pool: dict[str, tuple[str, ...]]
    arriving_at_pool: dict[str, tuple[str, ...]]
    departing_at_terminal: dict[str, tuple[str, ...]]
    wraparound_blocks: dict[str, tuple[str, ...]]
    waits: dict[tuple[str, str], int]
    lateness: dict[tuple[str, str], int]
    instance_fingerprint: str
    _by_id: dict[str, BlockPath] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_id.update({block.id: block for block in self.blocks})

    def block(self, block_id: str) -> BlockPath:
        return self._by_id[block_id]

    def __len__(self) -> int:
        return len(self.blocks)

    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.instance_fingerprint.encode("utf-8"))
        for block in self.blocks:
            digest.update(f"{block.id}:{block.legs}\n".encode("utf-8"))
        return digest.hexdigest()


def compute_attributes(legs: tuple[LegRef, ...], instance: Instance, block_id: str = "") -> BlockPath:
    """Fill every block attribute from its leg sequence and the schedule."""
    period = instance.period
    costs = instance.costs
    first_service = instance.service(legs[0][0])
    last_service = instance.service(legs[-1][0])
    departure = first_service.stops[legs[0][1]].departure
    arrival = last_service.stops[legs[-1][1] + 1].arrival

    capacity = None
    distance = 0.0
    border_crossings = 0
    transfer_wait = 0
    transfers = 0
    transfer_terminals: list[str] = []
    moving_arcs: list[str] = []
    handling_arcs: list[str] = []
    uses_extra = False
    elapsed = 0
    for position, (service_id, leg_index) in enumerate(legs):
        service = instance.service(service_id)
        uses_extra = uses_extra or service.is_extra
        leg = service.legs[leg_index]
        capacity = leg.capacity if capacity is None else min(capacity, leg.capacity)
        distance += leg.distance
        start, end = service.stops[leg_index], service.stops[leg_index + 1]
        if instance.terminal(start.terminal).region != instance.terminal(end.terminal).region:
            border_crossings += 1
        moving_arcs.append(f"{ArcKind.TRAIN_MOVING.value}|{service_id}|{leg_index}")
        elapsed += service.leg_duration(leg_index, period)
        if position == 0:
            continue
        previous_id, previous_leg = legs[position - 1]
        previous = instance.service(previous_id)
        stop = previous.stops[previous_leg + 1]
        dwell = cyclic_duration(stop.arrival, start.departure, period)
        elapsed += dwell
        if previous_id == service_id:
            handling_arcs.append(f"{ArcKind.TRAIN_HANDLING.value}|{service_id}|{leg_index}")
        else:
            transfers += 1
            transfer_wait += dwell
            transfer_terminals.append(stop.terminal)

    return BlockPath(
        id=block_id,
        origin=first_service.stops[legs[0][1]].terminal,
        destination=last_service.stops[legs[-1][1] + 1].terminal,
        departure=departure,
        arrival=arrival,
        legs=tuple(legs),
        transfer_terminals=tuple(transfer_terminals),
        capacity=capacity,
        transfers=transfers,
        border_crossings=border_crossings,
        distance=distance,
        transfer_wait=transfer_wait,
        duration=elapsed,
        wraps=departure + elapsed >= period,
        build_cost=to_money(costs.c_build + costs.c_trans * transfers),
        uses_extra=uses_extra,
        first_event=event_node_id(NodeKind.TOUT, legs[0][0], legs[0][1]),
        last_event=event_node_id(NodeKind.TIN, legs[-1][0], legs[-1][1] + 1),
        moving_arcs=tuple(moving_arcs),
        handling_arcs=tuple(handling_arcs),
    )


def leg_sequence_problems(legs: tuple[LegRef, ...], instance: Instance) -> list[str]:
    """Adjacency and transfer-time breaches along a leg sequence."""
    problems = []
    period = instance.period
    visited = [instance.service(legs[0][0]).stops[legs[0][1]].terminal]
    for position, (service_id, leg_index) in enumerate(legs):
        service = instance.service(service_id)
        if not 0 <= leg_index < len(service.legs):
            problems.append(f"{service_id} has no leg {leg_index}")
            continue
        if position > 0:
            previous_id, previous_leg = legs[position - 1]
            previous = instance.service(previous_id)
            here = previous.stops[previous_leg + 1]
            if previous_id == service_id:
                if leg_index != previous_leg + 1:
                    problems.append(f"{service_id} legs {previous_leg} and {leg_index} are not adjacent")
            else:
                start = service.stops[leg_index]
                if start.terminal != here.terminal:
                    problems.append(f"transfer {previous_id}->{service_id} changes terminal")
                elif cyclic_duration(here.arrival, start.departure, period) < instance.config.transfer_time:
                    problems.append(f"transfer {previous_id}->{service_id} at {here.terminal} is too short")
        nxt = service.stops[leg_index + 1].terminal
        if nxt in visited:
            problems.append(f"terminal {nxt} revisited")
        visited.append(nxt)
    return problems


def _transfer_options(network: TimeSpaceNetwork) -> dict[str, list[tuple[str, int, int]]]:
    options: dict[str, list[tuple[str, int, int]]] = {}
    for arc in network.arcs_of_kind(ArcKind.BLOCK_TRANSFER):
        tin = network.nodes[arc.tail]
        bt = network.nodes[arc.head]
        wait = cyclic_duration(tin.time, bt.time, network.period)
        options.setdefault(arc.tail, []).append((bt.service, bt.stop, wait))
    return options


def _enumerate_paths(instance: Instance, network: TimeSpaceNetwork, limits: BlockLimits) -> list[tuple[LegRef, ...]]:
    period = instance.period
    max_elapsed = min(limits.max_elapsed or period, period - 1)
    transfers_from = _transfer_options(network)
    found: list[tuple[LegRef, ...]] = []

    for chain in network.events.values():
        for root in chain:
            node = network.nodes[root]
            if node.kind is not NodeKind.TOUT:
                continue
            service = instance.service(node.service)
            first = service.leg_duration(node.stop, period)
            if first > max_elapsed:
                continue
            start = ((node.service, node.stop),)
            visited = (node.terminal, service.stops[node.stop + 1].terminal)
            stack = [(start, visited, first, 0)]
            while stack:
                legs, visited, elapsed, transfers = stack.pop()
                found.append(legs)
                service_id, leg_index = legs[-1]
                current = instance.service(service_id)
                here = leg_index + 1
                arrival = current.stops[here].arrival
                if here < len(current.stops) - 1:
                    step = cyclic_duration(arrival, current.stops[here].departure, period)
                    step += current.leg_duration(here, period)
                    nxt = current.stops[here + 1].terminal
                    if nxt not in visited and elapsed + step <= max_elapsed:
                        stack.append((legs + ((service_id, here),), visited + (nxt,), elapsed + step, transfers))
                if transfers >= limits.max_transfers:
                    continue
                tin = event_node_id(NodeKind.TIN, service_id, here)
                for other_id, stop, wait in transfers_from.get(tin, ()):
                    other = instance.service(other_id)
                    step = wait + other.leg_duration(stop, period)
                    nxt = other.stops[stop + 1].terminal
                    if nxt in visited or elapsed + step > max_elapsed:
                        continue
                    stack.append((legs + ((other_id, stop),), visited + (nxt,), elapsed + step, transfers + 1))
    return found


def demand_compatibility(
    blocks: tuple[BlockPath, ...], demands: tuple[Demand, ...], network: TimeSpaceNetwork
) -> tuple[dict[str, tuple[str, ...]], dict[str, tuple[str, ...]]]:
    """Blocks able to carry each demand inside its window, and the inverse map."""
    period = network.period
    by_od: dict[tuple[str, str], list[BlockPath]] = {}
    for block in blocks:
        by_od.setdefault((block.origin, block.destination), []).append(block)
    blocks_for_demand: dict[str, tuple[str, ...]] = {}
    demands_for_block: dict[str, list[str]] = {block.id: [] for block in blocks}
    for demand in demands:
        window = cyclic_duration(demand.release, demand.due, period)
        chosen = []
        for block in by_od.get((demand.origin, demand.destination), ()):
            if block_wait(block, demand, period) + block.duration <= window:
                chosen.append(block.id)
                demands_for_block[block.id].append(demand.id)
        blocks_for_demand[demand.id] = tuple(chosen)
    return blocks_for_demand, {key: tuple(value) for key, value in demands_for_block.items()}


def block_wait(block: BlockPath, demand: Demand, period: int) -> int:
    return cyclic_duration(demand.release, block.departure, period)


def lateness(block: BlockPath, demand: Demand, network: TimeSpaceNetwork, shortest: float | None = None) -> int:
    if shortest is None:
        shortest = shortest_path_time(network, demand)
    total = block_wait(block, demand, network.period) + block.duration
    return int(max(0, total - shortest))


def generate_blocks(instance: Instance, network: TimeSpaceNetwork, limits: BlockLimits | None = None) -> BlockCatalog:
    limits = limits or BlockLimits()
    allowed = limits.od_filter
    if limits.demand_od_only:
        demand_pairs = frozenset((d.origin, d.destination) for d in instance.demands)
        allowed = demand_pairs if allowed is None else allowed & demand_pairs

    paths = _enumerate_paths(instance, network, limits)
    candidates = []
    for legs in paths:
        block = compute_attributes(legs, instance)
        if allowed is not None and (block.origin, block.destination) not in allowed:
            continue
        candidates.append(block)
    candidates.sort(key=lambda b: (b.origin, b.departure, b.destination, b.arrival, b.legs))
    blocks = tuple(
        replace(block, id=f"B{index:05d}") for index, block in enumerate(candidates, start=1)
    )
    if not blocks:
        logger.warning("Block generation produced an empty catalog")

    blocks_for_demand, demands_for_block = demand_compatibility(blocks, instance.demands, network)
    by_id = {block.id: block for block in blocks}
    waits: dict[tuple[str, str], int] = {}
    late: dict[tuple[str, str], int] = {}
    for demand in instance.demands:
        shortest = shortest_path_time(network, demand)
        for block_id in blocks_for_demand[demand.id]:
            block = by_id[block_id]
            waits[(block_id, demand.id)] = block_wait(block, demand, network.period)
            late[(block_id, demand.id)] = lateness(block, demand, network, shortest)

    on_arc: dict[str, list[str]] = {}
    departing_pool: dict[str, list[str]] = {}
    arriving_pool: dict[str, list[str]] = {}
    departing_terminal: dict[str, list[str]] = {}
    wrapping: dict[str, list[str]] = {}
    for block in blocks:
        for arc_id in block.moving_arcs + block.handling_arcs:
            on_arc.setdefault(arc_id, []).append(block.id)
        departing_pool.setdefault(network.companion(block.first_event, NodeKind.POOLMINUS), []).append(block.id)
        arriving_pool.setdefault(network.companion(block.last_event, NodeKind.POOLPLUS), []).append(block.id)
        departing_terminal.setdefault(block.origin, []).append(block.id)
        if block.wraps:
            wrapping.setdefault(block.origin, []).append(block.id)

    def frozen(mapping: dict[str, list[str]]) -> dict[str, tuple[str, ...]]:
        return {key: tuple(value) for key, value in sorted(mapping.items())}

    catalog = BlockCatalog(
        blocks=blocks,
        blocks_for_demand=blocks_for_demand,
        demands_for_block=demands_for_block,
        blocks_on_arc=frozen(on_arc),
        departing_at_pool=frozen(departing_pool),
        arriving_at_pool=frozen(arriving_pool),
        departing_at_terminal=frozen(departing_terminal),
        wraparound_blocks=frozen(wrapping),
        waits=waits,
        lateness=late,
        instance_fingerprint=instance.fingerprint(),
    )
    logger.info(
        "Generated %d blocks (max transfers %d, %d demands with at least one block)",
        len(blocks),
        limits.max_transfers,
        sum(1 for ids in blocks_for_demand.values() if ids),
    )
    return catalog


def save_catalog_jsonl(catalog: BlockCatalog, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for block in catalog.blocks:
            handle.write(json.dumps(block.to_dict(), sort_keys=True) + "\n")
    return path
