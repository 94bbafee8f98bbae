import json
from collections import deque
from decimal import Decimal

import pytest

from railplan.blocks import (
    BlockLimits,
    compute_attributes,
    generate_blocks,
    leg_sequence_problems,
    save_catalog_jsonl,
)
from railplan.generator import SizeParams, generate_synthetic_network
from railplan.instance import parse_instance
from railplan.network import build_network


@pytest.fixture
def corridor_raw(shuttle_raw):
    """A -> B on S1, B -> C on S2 with a 100-minute connection at B."""
    shuttle_raw["terminals"].append({"id": "C", "region": "R2"})
    shuttle_raw["services"] = [
        {
            "id": "S1",
            "stops": [{"terminal": "A", "departure": 0}, {"terminal": "B", "arrival": 300}],
            "legs": [{"capacity": 1000, "distance": 300}],
        },
        {
            "id": "S2",
            "stops": [{"terminal": "B", "departure": 400}, {"terminal": "C", "arrival": 700}],
            "legs": [{"capacity": 800, "distance": 250}],
        },
    ]
    shuttle_raw["demands"][0]["destination"] = "C"
    shuttle_raw["demands"][0]["due"] = 900
    return shuttle_raw


@pytest.fixture
def corridor(corridor_raw):
    return parse_instance(corridor_raw)


class TestShuttleCatalog:
    def test_one_block_per_leg(self, shuttle_catalog):
        """Test ids follow origin then departure order"""
        assert [block.id for block in shuttle_catalog.blocks] == ["B00001", "B00002"]
        assert shuttle_catalog.block("B00001").legs == (("S1", 0),)
        assert shuttle_catalog.block("B00002").legs == (("S2", 0),)

    def test_block_attributes(self, shuttle_catalog):
        block = shuttle_catalog.block("B00001")
        assert (block.origin, block.destination) == ("A", "B")
        assert (block.departure, block.arrival) == (0, 300)
        assert block.capacity == 1000
        assert block.transfers == 0
        assert block.border_crossings == 1
        assert block.duration == 300
        assert not block.wraps
        assert block.build_cost == Decimal("100")
        assert block.first_event == "TOUT|S1|0"
        assert block.last_event == "TIN|S1|1"

    def test_demand_compatibility(self, shuttle_catalog):
        assert shuttle_catalog.blocks_for_demand["D1"] == ("B00001",)
        assert shuttle_catalog.demands_for_block["B00002"] == ()
        assert shuttle_catalog.waits[("B00001", "D1")] == 0
        assert shuttle_catalog.lateness[("B00001", "D1")] == 0

    def test_pool_indexes(self, shuttle_catalog):
        """Test blocks leave from the POOLMINUS of their first departure and land in the POOLPLUS of their last arrival"""
        assert shuttle_catalog.departing_at_pool["POOLMINUS|S1|0"] == ("B00001",)
        assert shuttle_catalog.arriving_at_pool["POOLPLUS|S1|1"] == ("B00001",)
        assert shuttle_catalog.departing_at_terminal == {"A": ("B00001",), "B": ("B00002",)}
        assert shuttle_catalog.blocks_on_arc["TrainMoving|S2|0"] == ("B00002",)
        assert shuttle_catalog.wraparound_blocks == {}

    def test_revisiting_paths_are_excluded(self, shuttle, shuttle_catalog):
        """Test the round trip A -> B -> A never becomes a block"""
        assert all(block.transfers == 0 for block in shuttle_catalog.blocks)
        assert "terminal A revisited" in leg_sequence_problems((("S1", 0), ("S2", 0)), shuttle)

    def test_demand_od_only(self, shuttle, shuttle_network):
        catalog = generate_blocks(shuttle, shuttle_network, BlockLimits(demand_od_only=True))
        assert [(b.origin, b.destination) for b in catalog.blocks] == [("A", "B")]

    def test_empty_filter_gives_empty_catalog(self, shuttle, shuttle_network):
        catalog = generate_blocks(shuttle, shuttle_network, BlockLimits(od_filter=frozenset()))
        assert len(catalog) == 0
        assert catalog.blocks_for_demand == {"D1": ()}

    def test_fingerprint_tracks_instance(self, shuttle_catalog, shuttle):
        assert shuttle_catalog.instance_fingerprint == shuttle.fingerprint()
        assert len(shuttle_catalog.fingerprint()) == 64


class TestWrapAround:
    def test_block_crossing_the_cycle_end(self, shuttle_raw):
        """Test a departure late in the cycle that arrives after the wrap"""
        shuttle_raw["services"][0]["stops"] = [{"terminal": "A", "departure": 1300}, {"terminal": "B", "arrival": 160}]
        shuttle_raw["demands"][0]["release"] = 1300
        shuttle_raw["demands"][0]["due"] = 400
        instance = parse_instance(shuttle_raw)
        catalog = generate_blocks(instance, build_network(instance))
        block = next(b for b in catalog.blocks if b.origin == "A")
        assert block.duration == 300
        assert block.wraps
        assert catalog.wraparound_blocks == {"A": (block.id,)}
        assert catalog.blocks_for_demand["D1"] == (block.id,)


class TestTransfers:
    def test_transfer_block(self, corridor):
        catalog = generate_blocks(corridor, build_network(corridor))
        through = [b for b in catalog.blocks if b.transfers == 1]
        assert len(through) == 1
        block = through[0]
        assert block.legs == (("S1", 0), ("S2", 0))
        assert block.transfer_terminals == ("B",)
        assert block.transfer_wait == 100
        assert block.duration == 700
        assert block.capacity == 800
        assert block.distance == 550
        assert block.build_cost == Decimal("10120")
        assert block.border_crossings == 1
        assert catalog.blocks_for_demand["D1"] == (block.id,)

    def test_transfer_limit(self, corridor):
        """Test max transfers bounds the path depth"""
        catalog = generate_blocks(corridor, build_network(corridor), BlockLimits(max_transfers=0))
        assert len(catalog) == 2
        assert catalog.blocks_for_demand["D1"] == ()

    def test_elapsed_limit(self, corridor):
        catalog = generate_blocks(corridor, build_network(corridor), BlockLimits(max_elapsed=500))
        assert all(block.duration <= 500 for block in catalog.blocks)
        assert len(catalog) == 2

    def test_too_short_connection(self, corridor):
        problems = leg_sequence_problems(
            (("S1", 0), ("S2", 0)),
            corridor.with_changes(config=corridor.config.model_copy(update={"transfer_time": 200})),
        )
        assert problems == ["transfer S1->S2 at B is too short"]

    def test_multi_stop_service_uses_handling_arc(self, corridor_raw):
        """Test staying on one train through a stop records the handling arc and no transfer"""
        corridor_raw["services"] = [
            {
                "id": "S1",
                "stops": [
                    {"terminal": "A", "departure": 0},
                    {"terminal": "B", "arrival": 300, "departure": 330},
                    {"terminal": "C", "arrival": 600},
                ],
                "legs": [{"capacity": 1000, "distance": 300}, {"capacity": 900, "distance": 250}],
            }
        ]
        instance = parse_instance(corridor_raw)
        block = compute_attributes((("S1", 0), ("S1", 1)), instance, "B1")
        assert block.transfers == 0
        assert block.transfer_wait == 0
        assert block.handling_arcs == ("TrainHandling|S1|1",)
        assert block.duration == 600
        assert block.capacity == 900
        assert block.build_cost == Decimal("100")


class TestCatalogExport:
    def test_jsonl_has_one_line_per_block(self, shuttle_catalog, tmp_path):
        lines = save_catalog_jsonl(shuttle_catalog, tmp_path / "catalog.jsonl").read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert first["id"] == "B00001"
        assert first["legs"] == [["S1", 0]]
        assert first["build_cost"] == "100.0000"


def enumerate_leg_sequences(instance, max_transfers=3, max_elapsed=None):
    """Breadth-first walk over the schedule: every loop-free leg sequence within the limits."""
    period = instance.period
    budget = min(max_elapsed or period, period - 1)

    def duration(service, leg):
        return (service.stops[leg + 1].arrival - service.stops[leg].departure) % period

    queue = deque()
    for service in instance.services:
        for leg in range(len(service.legs)):
            if duration(service, leg) <= budget:
                terminals = (service.stops[leg].terminal, service.stops[leg + 1].terminal)
                queue.append((((service.id, leg),), terminals, duration(service, leg), 0))
    found = []
    while queue:
        legs, terminals, elapsed, transfers = queue.popleft()
        found.append(legs)
        service_id, leg = legs[-1]
        current = instance.service(service_id)
        here = current.stops[leg + 1]
        for other in instance.services:
            for start in range(len(other.legs)):
                departure = other.stops[start]
                if departure.terminal != here.terminal:
                    continue
                wait = (departure.departure - here.arrival) % period
                if other.id == service_id:
                    if start != leg + 1:
                        continue
                    hops = transfers
                else:
                    if wait < instance.config.transfer_time:
                        continue
                    hops = transfers + 1
                nxt = other.stops[start + 1].terminal
                spent = elapsed + wait + duration(other, start)
                if nxt in terminals or hops > max_transfers or spent > budget:
                    continue
                queue.append((legs + ((other.id, start),), terminals + (nxt,), spent, hops))
    return found


@pytest.fixture(params=[0, 1, 2, 3])
def five_terminals(request):
    return generate_synthetic_network(SizeParams(terminals=5, services=6, max_legs=3), request.param)


class TestCatalogCompleteness:
    def test_matches_breadth_first_enumeration(self, five_terminals):
        """Test the catalog holds exactly the leg sequences a plain walk over the schedule finds"""
        catalog = generate_blocks(five_terminals, build_network(five_terminals))
        expected = enumerate_leg_sequences(five_terminals)
        assert sorted(block.legs for block in catalog.blocks) == sorted(expected)
        assert all(leg_sequence_problems(block.legs, five_terminals) == [] for block in catalog.blocks)

    @pytest.mark.parametrize("max_transfers, max_elapsed", [(0, None), (1, None), (2, 2000), (3, 4000)])
    def test_matches_under_limits(self, five_terminals, max_transfers, max_elapsed):
        limits = BlockLimits(max_transfers=max_transfers, max_elapsed=max_elapsed)
        catalog = generate_blocks(five_terminals, build_network(five_terminals), limits)
        expected = enumerate_leg_sequences(five_terminals, max_transfers, max_elapsed)
        assert sorted(block.legs for block in catalog.blocks) == sorted(expected)

    def test_transfer_time_boundary(self, corridor_raw):
        """Test the 100-minute connection at B is offered at a transfer time of 100 and not at 101"""
        through = (("S1", 0), ("S2", 0))
        for transfer_time, offered in ((101, False), (100, True)):
            corridor_raw["config"]["transferTime"] = transfer_time
            instance = parse_instance(corridor_raw)
            catalog = generate_blocks(instance, build_network(instance))
            assert (through in {block.legs for block in catalog.blocks}) is offered

    def test_more_transfers_never_shrink_the_catalog(self, five_terminals):
        network = build_network(five_terminals)
        previous = set()
        for max_transfers in range(4):
            legs = {block.legs for block in generate_blocks(five_terminals, network, BlockLimits(max_transfers=max_transfers)).blocks}
            assert previous <= legs
            previous = legs

    def test_longer_elapsed_never_shrinks_the_catalog(self, five_terminals):
        network = build_network(five_terminals)
        previous = set()
        for max_elapsed in (300, 1000, 3000, 6000, None):
            legs = {block.legs for block in generate_blocks(five_terminals, network, BlockLimits(max_elapsed=max_elapsed)).blocks}
            assert previous <= legs
            previous = legs
