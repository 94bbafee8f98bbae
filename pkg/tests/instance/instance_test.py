import json
from decimal import Decimal

import pytest

from railplan.blocks import generate_blocks
from railplan.errors import DanglingReference, InvariantViolation, SchemaError
from railplan.instance import (
    ContainerType,
    Leg,
    PlatformType,
    ServiceKind,
    Stop,
    TrainService,
    cyclic_duration,
    default_railcar_catalog,
    load_instance,
    parse_instance,
    save_instance,
    validate_instance,
)
from railplan.network import build_network


class TestParseInstance:
    def test_camel_case_document_parses(self, shuttle):
        """Test camelCase keys map onto the model fields"""
        assert shuttle.period == 1440
        assert shuttle.config.transfer_time == 60
        assert shuttle.demand("D1").container_type is ContainerType.T40
        assert shuttle.railcar("1x53").platform_type is PlatformType.P53
        assert shuttle.service("S1").origin == "A"
        assert shuttle.service("S1").destination == "B"

    def test_unknown_field_is_rejected(self, shuttle_raw):
        """Test extra keys raise a schema error that names the field"""
        shuttle_raw["demands"][0]["priority"] = 3
        with pytest.raises(SchemaError) as err:
            parse_instance(shuttle_raw)
        assert "demands.0.priority" in str(err.value)

    def test_missing_transfer_time(self, shuttle_raw):
        """Test the transfer time has no default"""
        del shuttle_raw["config"]["transferTime"]
        with pytest.raises(SchemaError):
            parse_instance(shuttle_raw)

    def test_unsupported_schema_version(self, shuttle_raw):
        shuttle_raw["schemaVersion"] = 99
        with pytest.raises(SchemaError) as err:
            parse_instance(shuttle_raw)
        assert err.value.loc == "schemaVersion"

    def test_dangling_demand_terminal(self, shuttle_raw):
        """Test references to undefined terminals are reported by id"""
        shuttle_raw["demands"][0]["destination"] = "C"
        with pytest.raises(DanglingReference) as err:
            parse_instance(shuttle_raw)
        assert err.value.ref_id == "C"
        assert "demand D1" in str(err.value)

    def test_dangling_terminal_limit(self, shuttle_raw):
        shuttle_raw["railcars"][0]["terminalLimits"] = {"Z": 2}
        with pytest.raises(DanglingReference):
            parse_instance(shuttle_raw)

    def test_zero_volume_fails_schema(self, shuttle_raw):
        shuttle_raw["demands"][0]["volume"] = 0
        with pytest.raises(SchemaError):
            parse_instance(shuttle_raw)

    def test_same_origin_and_destination(self, shuttle_raw):
        """Test rule violations surface as InvariantViolation"""
        shuttle_raw["demands"][0]["destination"] = "A"
        with pytest.raises(InvariantViolation) as err:
            parse_instance(shuttle_raw)
        assert err.value.rule == "origin and destination must differ"


class TestValidation:
    def test_valid_instance_has_no_violations(self, shuttle):
        report = validate_instance(shuttle)
        assert report.ok
        assert report.violations == ()

    def test_time_outside_cycle(self, shuttle_raw):
        """Test stop times must lie in [0, T)"""
        shuttle_raw["services"][0]["stops"][1]["arrival"] = 1440
        with pytest.raises(InvariantViolation) as err:
            parse_instance(shuttle_raw)
        assert "outside [0, T)" in err.value.rule

    def test_round_trip_service_is_valid(self, shuttle_raw):
        """Test a train may call at the same terminal twice while its blocks never do"""
        service = shuttle_raw["services"][0]
        service["stops"] = [
            {"terminal": "A", "departure": 0},
            {"terminal": "B", "arrival": 300, "departure": 400},
            {"terminal": "A", "arrival": 700},
        ]
        service["legs"] = [{"capacity": 1000, "distance": 300}, {"capacity": 1000, "distance": 300}]
        instance = parse_instance(shuttle_raw)
        assert validate_instance(instance).ok
        catalog = generate_blocks(instance, build_network(instance))
        assert sorted(block.legs for block in catalog.blocks) == [(("S1", 0),), (("S1", 1),), (("S2", 0),)]

    def test_leg_count_mismatch(self, shuttle_raw):
        shuttle_raw["services"][1]["legs"].append({"capacity": 10, "distance": 5})
        with pytest.raises(InvariantViolation) as err:
            parse_instance(shuttle_raw)
        assert "one leg per pair" in err.value.rule

    def test_collects_every_issue(self, shuttle):
        """Test validation reports all broken rules instead of stopping at the first"""
        broken = shuttle.with_changes(
            config=shuttle.config.model_copy(update={"transfer_time": 5000}),
            railcars=shuttle.railcars + shuttle.railcars,
        )
        rules = {issue.rule for issue in validate_instance(broken).violations}
        assert "transfer time must lie in [0, T)" in rules
        assert "railcar ids must be unique" in rules

    def test_car_length_monotonicity_is_a_warning(self, shuttle):
        """Test longer cars that are not shorter per platform only warn"""
        odd = default_railcar_catalog()[3].model_copy(update={"id": "3x53", "platform_count": 3, "car_length": 300.0})
        report = validate_instance(shuttle.with_changes(railcars=shuttle.railcars + (odd,)))
        assert report.ok
        assert any("per platform" in issue.rule for issue in report.warnings)


class TestInstanceValues:
    def test_cyclic_duration_wraps(self):
        assert cyclic_duration(1400, 100, 1440) == 140
        assert cyclic_duration(100, 100, 1440) == 0
        assert cyclic_duration(100, 250, 10080) == 150
        assert cyclic_duration(10000, 200, 10080) == 280

    def test_outsourcing_cost_default_and_override(self, shuttle):
        demand = shuttle.demand("D1")
        assert shuttle.outsourcing_cost(demand) == Decimal("100000")
        priced = demand.model_copy(update={"outsourcing_cost": Decimal("250.5")})
        assert shuttle.outsourcing_cost(priced) == Decimal("250.5")

    def test_extra_service_cost_formula(self, shuttle):
        """Test fixed cost plus the per-foot-kilometre charge"""
        service = shuttle.service("S1")
        assert shuttle.extra_service_cost(service) == Decimal("703000")

    def test_two_leg_extra_cost(self, shuttle):
        service = TrainService(
            id="X",
            kind=ServiceKind.EXTRA,
            stops=(
                Stop(terminal="A", departure=0),
                Stop(terminal="B", arrival=500, departure=600),
                Stop(terminal="A", arrival=900),
            ),
            legs=(Leg(capacity=7000, distance=500), Leg(capacity=7000, distance=300)),
        )
        assert shuttle.extra_service_cost(service) == Decimal("756000")

    def test_default_catalog(self):
        catalog = {car.id: car for car in default_railcar_catalog()}
        assert sorted(catalog) == ["1x40", "1x53", "3x40", "3x53", "5x40", "5x53"]
        assert catalog["5x53"].slots == 10
        assert catalog["3x40"].car_length == 130.0

    def test_fingerprint_is_stable(self, shuttle, shuttle_raw):
        assert shuttle.fingerprint() == parse_instance(shuttle_raw).fingerprint()

    def test_with_changes_rebuilds_lookups(self, shuttle):
        trimmed = shuttle.with_changes(demands=())
        with pytest.raises(KeyError):
            trimmed.demand("D1")
        assert shuttle.demand("D1").volume == 2


class TestInstanceFiles:
    def test_save_then_load(self, shuttle, tmp_path):
        path = save_instance(shuttle, tmp_path / "nested" / "instance.json")
        assert load_instance(path).fingerprint() == shuttle.fingerprint()

    def test_malformed_json_reports_position(self, tmp_path):
        """Test malformed JSON carries line and column"""
        path = tmp_path / "broken.json"
        path.write_text('{\n  "terminals": [,]\n}\n')
        with pytest.raises(SchemaError) as err:
            load_instance(path)
        assert err.value.line == 2
        assert err.value.column is not None

    def test_missing_file(self, tmp_path):
        with pytest.raises(SchemaError):
            load_instance(tmp_path / "absent.json")

    def test_saved_document_uses_camel_case(self, shuttle, tmp_path):
        data = json.loads(save_instance(shuttle, tmp_path / "i.json").read_text())
        assert "transferTime" in data["config"]
        assert data["demands"][0]["containerType"] == "T40"
