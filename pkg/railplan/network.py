"""Cyclic four-layer time-space network built from the train schedule.

Nodes live on the train, block, car and container layers. Every train
departure (TOUT) and arrival (TIN) at a terminal spawns the companion nodes of
the other layers at the same moment, so each terminal carries an ordered list
of events shared by its pool and DIN chains. Simultaneous events are ordered
arrivals first, then by service id, then by stop index.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import networkx as nx

from .errors import NetworkError
from .instance import Demand, Instance, cyclic_duration

logger = logging.getLogger(__name__)

UNREACHABLE = math.inf


class Layer(str, Enum):
    TRAIN = "train"
    BLOCK = "block"
    CAR = "car"
    CONTAINER = "container"


class NodeKind(str, Enum):
    TIN = "TIN"
    TOUT = "TOUT"
    BO = "BO"
    BD = "BD"
    BT = "BT"
    POOLPLUS = "POOLPLUS"
    POOLMINUS = "POOLMINUS"
    CO = "CO"
    CD = "CD"
    DIN = "DIN"
    DOUT = "DOUT"
    CSINK = "CSINK"


NODE_LAYER = {
    NodeKind.TIN: Layer.TRAIN,
    NodeKind.TOUT: Layer.TRAIN,
    NodeKind.BO: Layer.BLOCK,
    NodeKind.BD: Layer.BLOCK,
    NodeKind.BT: Layer.BLOCK,
    NodeKind.POOLPLUS: Layer.CAR,
    NodeKind.POOLMINUS: Layer.CAR,
    NodeKind.CO: Layer.CAR,
    NodeKind.CD: Layer.CAR,
    NodeKind.DIN: Layer.CONTAINER,
    NodeKind.DOUT: Layer.CONTAINER,
    NodeKind.CSINK: Layer.CONTAINER,
}

DEPARTURE_COMPANIONS = (NodeKind.DIN, NodeKind.POOLMINUS, NodeKind.CO, NodeKind.BO, NodeKind.BT)
ARRIVAL_COMPANIONS = (NodeKind.DOUT, NodeKind.POOLPLUS, NodeKind.CD, NodeKind.BD)


class ArcKind(str, Enum):
    TRAIN_MOVING = "TrainMoving"
    TRAIN_HANDLING = "TrainHandling"
    CONTAINER_WAIT = "ContainerWait"
    CONTAINER_LOAD = "ContainerLoad"
    POOL_TO_POOL = "Pool2Pool"
    POOL_TO_LOAD = "Pool2Load"
    POOL_TO_BLOCK = "Pool2Block"
    CAR_TO_BLOCK = "Car2Block"
    BLOCK_BUILD = "BlockBuild"
    BLOCK_TRANSFER = "BlockTransfer"
    BLOCK_ATTACH = "BlockAttach"
    BLOCK_DISMANTLE = "BlockDismantle"
    EMPTY_TO_POOL = "Empty2Pool"
    CARS_DEST = "CarsDest"
    UNLOADED_TO_POOL = "Unloaded2Pool"
    CONTAINER_DEST = "ContainerDest"
    CONTAINER_DELIVERY = "ContainerDelivery"
    ARTIFICIAL = "Artificial"


_POOLS = (NodeKind.POOLPLUS, NodeKind.POOLMINUS)

# tail kinds, head kinds, endpoints share the event moment
ARC_TEMPLATES: dict[ArcKind, tuple[tuple[NodeKind, ...], tuple[NodeKind, ...], bool]] = {
    ArcKind.TRAIN_MOVING: ((NodeKind.TOUT,), (NodeKind.TIN,), False),
    ArcKind.TRAIN_HANDLING: ((NodeKind.TIN,), (NodeKind.TOUT,), False),
    ArcKind.CONTAINER_WAIT: ((NodeKind.DIN,), (NodeKind.DIN,), False),
    ArcKind.CONTAINER_LOAD: ((NodeKind.DIN,), (NodeKind.CO,), True),
    ArcKind.POOL_TO_POOL: (_POOLS, _POOLS, False),
    ArcKind.POOL_TO_LOAD: ((NodeKind.POOLMINUS,), (NodeKind.CO,), True),
    ArcKind.POOL_TO_BLOCK: ((NodeKind.POOLMINUS,), (NodeKind.BO,), True),
    ArcKind.CAR_TO_BLOCK: ((NodeKind.CO,), (NodeKind.BO,), True),
    ArcKind.BLOCK_BUILD: ((NodeKind.BO,), (NodeKind.BT,), True),
    ArcKind.BLOCK_TRANSFER: ((NodeKind.TIN,), (NodeKind.BT,), False),
    ArcKind.BLOCK_ATTACH: ((NodeKind.BT,), (NodeKind.TOUT,), True),
    ArcKind.BLOCK_DISMANTLE: ((NodeKind.TIN,), (NodeKind.BD,), True),
    ArcKind.EMPTY_TO_POOL: ((NodeKind.BD,), (NodeKind.POOLPLUS,), True),
    ArcKind.CARS_DEST: ((NodeKind.BD,), (NodeKind.CD,), True),
    ArcKind.UNLOADED_TO_POOL: ((NodeKind.CD,), (NodeKind.POOLPLUS,), True),
    ArcKind.CONTAINER_DEST: ((NodeKind.CD,), (NodeKind.DOUT,), True),
    ArcKind.CONTAINER_DELIVERY: ((NodeKind.DOUT,), (NodeKind.CSINK,), False),
    ArcKind.ARTIFICIAL: ((NodeKind.DIN,), (NodeKind.CSINK,), False),
}


@dataclass(frozen=True)
class EventNode:
    id: str
    layer: Layer
    kind: NodeKind
    terminal: str
    time: int | None
    service: str | None = None
    stop: int | None = None


@dataclass(frozen=True)
class NetworkArc:
    id: str
    kind: ArcKind
    tail: str | None
    head: str
    wraps: bool = False
    capacity: int | None = None
    distance: float | None = None
    service: str | None = None
    leg: int | None = None
    demand: str | None = None


def event_node_id(kind: NodeKind, service: str, stop: int) -> str:
    return f"{kind.value}|{service}|{stop}"


def sink_node_id(terminal: str) -> str:
    return f"{NodeKind.CSINK.value}|{terminal}"


@dataclass
class TimeSpaceNetwork:
    period: int
    transfer_time: int
    nodes: dict[str, EventNode]
    arcs: dict[str, NetworkArc]
    events: dict[str, tuple[str, ...]]
    pool_sequence: dict[str, tuple[str, ...]]
    din_sequence: dict[str, tuple[str, ...]]
    artificial: dict[str, NetworkArc]
    graph: nx.MultiDiGraph = field(repr=False)
    travel: nx.DiGraph = field(repr=False)
    _reach: dict = field(default_factory=dict, repr=False, compare=False)

    def node(self, node_id: str) -> EventNode:
        return self.nodes[node_id]

    def companion(self, event_id: str, kind: NodeKind) -> str:
        """Same-moment node of ``kind`` attached to a TIN/TOUT event."""
        event = self.nodes[event_id]
        return event_node_id(kind, event.service, event.stop)

    def pool_predecessor(self, pool_id: str) -> str:
        node = self.nodes[pool_id]
        chain = self.pool_sequence[node.terminal]
        return chain[chain.index(pool_id) - 1]

    def last_pool_node(self, terminal: str) -> str | None:
        chain = self.pool_sequence.get(terminal, ())
        return chain[-1] if chain else None

    def moving_arc_id(self, service: str, leg: int) -> str:
        return f"{ArcKind.TRAIN_MOVING.value}|{service}|{leg}"

    def handling_arc_id(self, service: str, stop: int) -> str:
        return f"{ArcKind.TRAIN_HANDLING.value}|{service}|{stop}"

    def arcs_of_kind(self, kind: ArcKind) -> list[NetworkArc]:
        return [arc for arc in self.arcs.values() if arc.kind is kind]

    def reach_from(self, tout_id: str) -> dict[str, float]:
        """Minutes from a departure event to every reachable TIN/TOUT event."""
        if tout_id not in self._reach:
            self._reach[tout_id] = nx.single_source_dijkstra_path_length(self.travel, tout_id, weight="minutes")
        return self._reach[tout_id]

    def time_to_destination(self, tout_id: str, destination: str) -> float:
        lengths = self.reach_from(tout_id)
        best = UNREACHABLE
        for node_id, minutes in lengths.items():
            node = self.nodes[node_id]
            if node.kind is NodeKind.TIN and node.terminal == destination:
                best = min(best, minutes)
        return best

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "transferTime": self.transfer_time,
            "nodes": [_plain(asdict(node)) for node in self.nodes.values()],
            "arcs": [_plain(asdict(arc)) for arc in self.arcs.values()],
        }


def _plain(record: dict) -> dict:
    return {key: value.value if isinstance(value, Enum) else value for key, value in record.items()}


def _event_order(instance: Instance) -> dict[str, list[tuple[int, int, str, int]]]:
    per_terminal: dict[str, list[tuple[int, int, str, int]]] = {}
    for service in instance.services:
        for index, stop in enumerate(service.stops):
            if stop.arrival is not None:
                per_terminal.setdefault(stop.terminal, []).append((stop.arrival, 0, service.id, index))
            if stop.departure is not None:
                per_terminal.setdefault(stop.terminal, []).append((stop.departure, 1, service.id, index))
    for events in per_terminal.values():
        events.sort()
    return dict(sorted(per_terminal.items()))


def build_network(instance: Instance) -> TimeSpaceNetwork:
    if not instance.services:
        raise NetworkError("cannot build a network from an empty schedule")
    period = instance.period
    transfer_time = instance.config.transfer_time
    nodes: dict[str, EventNode] = {}
    arcs: dict[str, NetworkArc] = {}

    def add_node(kind: NodeKind, terminal: str, time: int | None, service=None, stop=None) -> str:
        node_id = sink_node_id(terminal) if kind is NodeKind.CSINK else event_node_id(kind, service, stop)
        nodes[node_id] = EventNode(node_id, NODE_LAYER[kind], kind, terminal, time, service, stop)
        return node_id

    def add_arc(kind: ArcKind, tail: str | None, head: str, suffix: str, **extra) -> NetworkArc:
        arc_id = f"{kind.value}|{suffix}"
        wraps = extra.pop("wraps", None)
        if wraps is None and tail is not None:
            wraps = nodes[head].time is not None and nodes[head].time < nodes[tail].time
        arc = NetworkArc(arc_id, kind, tail, head, bool(wraps), **extra)
        arcs[arc_id] = arc
        return arc

    for terminal in instance.terminals:
        add_node(NodeKind.CSINK, terminal.id, None)

    ordered = _event_order(instance)
    events: dict[str, tuple[str, ...]] = {}
    for terminal, moments in ordered.items():
        chain = []
        for time, is_departure, service, stop in moments:
            if is_departure:
                chain.append(add_node(NodeKind.TOUT, terminal, time, service, stop))
                for kind in DEPARTURE_COMPANIONS:
                    add_node(kind, terminal, time, service, stop)
            else:
                chain.append(add_node(NodeKind.TIN, terminal, time, service, stop))
                for kind in ARRIVAL_COMPANIONS:
                    add_node(kind, terminal, time, service, stop)
        events[terminal] = tuple(chain)

    for service in instance.services:
        last = len(service.stops) - 1
        for leg_index, leg in enumerate(service.legs):
            add_arc(
                ArcKind.TRAIN_MOVING,
                event_node_id(NodeKind.TOUT, service.id, leg_index),
                event_node_id(NodeKind.TIN, service.id, leg_index + 1),
                f"{service.id}|{leg_index}",
                capacity=leg.capacity,
                distance=leg.distance,
                service=service.id,
                leg=leg_index,
            )
        for stop in range(1, last):
            add_arc(
                ArcKind.TRAIN_HANDLING,
                event_node_id(NodeKind.TIN, service.id, stop),
                event_node_id(NodeKind.TOUT, service.id, stop),
                f"{service.id}|{stop}",
                service=service.id,
            )

    pool_sequence: dict[str, tuple[str, ...]] = {}
    din_sequence: dict[str, tuple[str, ...]] = {}
    for terminal, chain in events.items():
        pools = []
        dins = []
        for event_id in chain:
            event = nodes[event_id]
            suffix = f"{event.service}|{event.stop}"
            if event.kind is NodeKind.TOUT:
                pool = event_node_id(NodeKind.POOLMINUS, event.service, event.stop)
                din = event_node_id(NodeKind.DIN, event.service, event.stop)
                co = event_node_id(NodeKind.CO, event.service, event.stop)
                bo = event_node_id(NodeKind.BO, event.service, event.stop)
                bt = event_node_id(NodeKind.BT, event.service, event.stop)
                pools.append(pool)
                dins.append(din)
                add_arc(ArcKind.CONTAINER_LOAD, din, co, suffix)
                add_arc(ArcKind.POOL_TO_LOAD, pool, co, suffix)
                add_arc(ArcKind.POOL_TO_BLOCK, pool, bo, suffix)
                add_arc(ArcKind.CAR_TO_BLOCK, co, bo, suffix)
                add_arc(ArcKind.BLOCK_BUILD, bo, bt, suffix)
                add_arc(ArcKind.BLOCK_ATTACH, bt, event_id, suffix)
            else:
                pool = event_node_id(NodeKind.POOLPLUS, event.service, event.stop)
                bd = event_node_id(NodeKind.BD, event.service, event.stop)
                cd = event_node_id(NodeKind.CD, event.service, event.stop)
                dout = event_node_id(NodeKind.DOUT, event.service, event.stop)
                pools.append(pool)
                add_arc(ArcKind.BLOCK_DISMANTLE, event_id, bd, suffix)
                add_arc(ArcKind.EMPTY_TO_POOL, bd, pool, suffix)
                add_arc(ArcKind.CARS_DEST, bd, cd, suffix)
                add_arc(ArcKind.UNLOADED_TO_POOL, cd, pool, suffix)
                add_arc(ArcKind.CONTAINER_DEST, cd, dout, suffix)
                add_arc(ArcKind.CONTAINER_DELIVERY, dout, sink_node_id(terminal), suffix)
        pool_sequence[terminal] = tuple(pools)
        din_sequence[terminal] = tuple(dins)
        _chain_arcs(add_arc, ArcKind.POOL_TO_POOL, terminal, pools)
        _chain_arcs(add_arc, ArcKind.CONTAINER_WAIT, terminal, dins)

    for terminal, chain in events.items():
        arrivals = [nodes[e] for e in chain if nodes[e].kind is NodeKind.TIN]
        departures = [nodes[e] for e in chain if nodes[e].kind is NodeKind.TOUT]
        for tin in arrivals:
            for tout in departures:
                if tout.service == tin.service:
                    continue
                if cyclic_duration(tin.time, tout.time, period) < transfer_time:
                    continue
                bt = event_node_id(NodeKind.BT, tout.service, tout.stop)
                add_arc(
                    ArcKind.BLOCK_TRANSFER,
                    tin.id,
                    bt,
                    f"{tin.service}|{tin.stop}|{tout.service}|{tout.stop}",
                    wraps=tout.time < tin.time,
                )

    graph = nx.MultiDiGraph()
    for node in nodes.values():
        graph.add_node(node.id, kind=node.kind, terminal=node.terminal, time=node.time)
    for arc in arcs.values():
        graph.add_edge(arc.tail, arc.head, key=arc.id, kind=arc.kind)

    network = TimeSpaceNetwork(
        period=period,
        transfer_time=transfer_time,
        nodes=nodes,
        arcs=arcs,
        events=events,
        pool_sequence=pool_sequence,
        din_sequence=din_sequence,
        artificial={},
        graph=graph,
        travel=_travel_graph(nodes, arcs, period),
    )
    for demand in instance.demands:
        feasible = din_nodes_for_demand(network, demand)
        tail = feasible[-1] if feasible else None
        arc = NetworkArc(
            f"{ArcKind.ARTIFICIAL.value}|{demand.id}",
            ArcKind.ARTIFICIAL,
            tail,
            sink_node_id(demand.destination),
            demand=demand.id,
        )
        arcs[arc.id] = arc
        network.artificial[demand.id] = arc
        if tail is not None:
            graph.add_edge(tail, arc.head, key=arc.id, kind=arc.kind)

    logger.info(
        "Built time-space network: %d nodes, %d arcs over %d terminals",
        len(nodes),
        len(arcs),
        len(events),
    )
    return network


def _chain_arcs(add_arc, kind: ArcKind, terminal: str, chain: list[str]) -> None:
    # successive nodes, closed into one cycle; only the closing arc wraps
    for index, tail in enumerate(chain):
        closing = index == len(chain) - 1
        head = chain[0] if closing else chain[index + 1]
        add_arc(kind, tail, head, f"{terminal}|{index}", wraps=closing)


def _travel_graph(nodes, arcs, period: int) -> nx.DiGraph:
    """TIN/TOUT graph weighted by elapsed minutes, used for shortest travel times."""
    travel = nx.DiGraph()
    for node in nodes.values():
        if node.kind in (NodeKind.TIN, NodeKind.TOUT):
            travel.add_node(node.id)
    for arc in arcs.values():
        if arc.kind in (ArcKind.TRAIN_MOVING, ArcKind.TRAIN_HANDLING):
            minutes = cyclic_duration(nodes[arc.tail].time, nodes[arc.head].time, period)
            travel.add_edge(arc.tail, arc.head, minutes=minutes)
        elif arc.kind is ArcKind.BLOCK_TRANSFER:
            tin = nodes[arc.tail]
            bt = nodes[arc.head]
            tout = event_node_id(NodeKind.TOUT, bt.service, bt.stop)
            travel.add_edge(tin.id, tout, minutes=cyclic_duration(tin.time, bt.time, period))
    return travel


def _departure_options(network: TimeSpaceNetwork, demand: Demand) -> list[tuple[int, float, str]]:
    options = []
    for index, din in enumerate(network.din_sequence.get(demand.origin, ())):
        node = network.nodes[din]
        tout = event_node_id(NodeKind.TOUT, node.service, node.stop)
        wait = cyclic_duration(demand.release, node.time, network.period)
        travel = network.time_to_destination(tout, demand.destination)
        options.append((wait, travel, din, index))
    options.sort(key=lambda option: (option[0], option[3]))
    return [(wait, travel, din) for wait, travel, din, _ in options]


def din_nodes_for_demand(network: TimeSpaceNetwork, demand: Demand) -> list[str]:
    """DIN nodes at the demand origin that still deliver inside the demand window, by wait."""
    window = cyclic_duration(demand.release, demand.due, network.period)
    return [din for wait, travel, din in _departure_options(network, demand) if wait + travel <= window]


def shortest_path_time(network: TimeSpaceNetwork, demand: Demand) -> float:
    """Release-to-arrival minutes ignoring capacities and fleets; ``inf`` when unreachable."""
    best = UNREACHABLE
    for wait, travel, _ in _departure_options(network, demand):
        best = min(best, wait + travel)
    return best


def save_network_json(network: TimeSpaceNetwork, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(network.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def network_to_dot(network: TimeSpaceNetwork) -> str:
    """Graphviz text for small fixtures, one cluster per terminal."""
    lines = ["digraph timespace {", "  rankdir=LR;"]
    for index, (terminal, chain) in enumerate(network.events.items()):
        lines.append(f'  subgraph cluster_{index} {{ label="{terminal}";')
        for event_id in chain:
            event = network.nodes[event_id]
            lines.append(f'    "{event_id}" [label="{event.kind.value} {event.time}"];')
        lines.append("  }")
    for arc in network.arcs.values():
        if arc.tail is None:
            continue
        style = ' style="dashed"' if arc.wraps else ""
        lines.append(f'  "{arc.tail}" -> "{arc.head}" [label="{arc.kind.value}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def template_violations(network: TimeSpaceNetwork) -> list[str]:
    """Arcs whose endpoints break their kind's layer, terminal or moment template."""
    problems = []
    for arc in network.arcs.values():
        tail_kinds, head_kinds, same_moment = ARC_TEMPLATES[arc.kind]
        head = network.nodes[arc.head]
        if head.kind not in head_kinds:
            problems.append(f"{arc.id}: head is {head.kind.value}")
        if arc.tail is None:
            if arc.kind is not ArcKind.ARTIFICIAL:
                problems.append(f"{arc.id}: missing tail")
            continue
        tail = network.nodes[arc.tail]
        if tail.kind not in tail_kinds:
            problems.append(f"{arc.id}: tail is {tail.kind.value}")
        if arc.kind is not ArcKind.TRAIN_MOVING and arc.kind is not ArcKind.ARTIFICIAL and tail.terminal != head.terminal:
            problems.append(f"{arc.id}: crosses terminals")
        if same_moment and tail.time != head.time:
            problems.append(f"{arc.id}: endpoints at different moments")
        if arc.kind is ArcKind.TRAIN_MOVING and not (arc.capacity and arc.capacity > 0):
            problems.append(f"{arc.id}: non-positive capacity")
        if arc.kind is ArcKind.BLOCK_TRANSFER:
            if cyclic_duration(tail.time, head.time, network.period) < network.transfer_time:
                problems.append(f"{arc.id}: shorter than the transfer time")
            if tail.service == head.service:
                problems.append(f"{arc.id}: transfers onto the same service")
    return problems
