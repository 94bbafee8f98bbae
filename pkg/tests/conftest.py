import sys
from pathlib import Path

import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from railplan.audit import PlanSolution  # noqa: E402
from railplan.backends import PulpCbcBackend  # noqa: E402
from railplan.blocks import generate_blocks  # noqa: E402
from railplan.formulations import Formulation, build_model  # noqa: E402
from railplan.instance import parse_instance  # noqa: E402
from railplan.milp import VarKey, VarKind  # noqa: E402
from railplan.network import build_network  # noqa: E402


def shuttle_data():
    """Two terminals in different regions, one train each way, two 40-ft boxes A->B, one 1x53 car."""
    return {
        "terminals": [
            {"id": "A", "name": "Alpha", "region": "R1"},
            {"id": "B", "name": "Beta", "region": "R2"},
        ],
        "services": [
            {
                "id": "S1",
                "stops": [{"terminal": "A", "departure": 0}, {"terminal": "B", "arrival": 300}],
                "legs": [{"capacity": 1000, "distance": 300}],
            },
            {
                "id": "S2",
                "stops": [{"terminal": "B", "departure": 600}, {"terminal": "A", "arrival": 900}],
                "legs": [{"capacity": 1000, "distance": 300}],
            },
        ],
        "demands": [
            {
                "id": "D1",
                "origin": "A",
                "destination": "B",
                "release": 0,
                "due": 600,
                "volume": 2,
                "containerType": "T40",
            }
        ],
        "railcars": [
            {"id": "1x53", "platformType": "P53", "platformCount": 1, "carLength": 66, "fleetLimit": 1}
        ],
        "config": {"scheduleLength": 1440, "transferTime": 60},
    }


@pytest.fixture
def shuttle_raw():
    return shuttle_data()


@pytest.fixture
def shuttle():
    return parse_instance(shuttle_data())


@pytest.fixture
def shuttle_network(shuttle):
    return build_network(shuttle)


@pytest.fixture
def shuttle_catalog(shuttle, shuttle_network):
    return generate_blocks(shuttle, shuttle_network)


@pytest.fixture
def cbc():
    backend = PulpCbcBackend()
    if not backend.available():
        pytest.skip("CBC binary not available")
    return backend


def _key(kind, *index):
    return VarKey(kind, tuple(index))


# Hand-checked optimum of the shuttle for each formulation: objective and nonzero values.
SHUTTLE_OPTIMA = {
    Formulation.SSNDRM: (
        4075.0,
        {
            _key(VarKind.BLOCK, "B00001"): 1.0,
            _key(VarKind.BLOCK, "B00002"): 1.0,
            _key(VarKind.FLOW, "B00001", "D1"): 2.0,
            _key(VarKind.LOADED_CARS, "B00001", "1x53"): 1.0,
            _key(VarKind.PAIR_LOAD, "B00001", "P53", "T40", "T40"): 1.0,
            _key(VarKind.EMPTY_CARS, "B00002", "1x53"): 1.0,
            _key(VarKind.ALLOCATION, "1x53", "A"): 1.0,
            _key(VarKind.POOL, "1x53", "A", "POOLPLUS|S2|1"): 1.0,
            _key(VarKind.POOL, "1x53", "B", "POOLPLUS|S1|1"): 1.0,
        },
    ),
    Formulation.UNRESTRICTED_FLEET: (
        2550.0,
        {
            _key(VarKind.BLOCK, "B00001"): 1.0,
            _key(VarKind.FLOW, "B00001", "D1"): 2.0,
            _key(VarKind.LOADED_CARS, "B00001", "1x53"): 1.0,
            _key(VarKind.PAIR_LOAD, "B00001", "P53", "T40", "T40"): 1.0,
        },
    ),
    Formulation.UNRESTRICTED_LOADING: (
        2550.0,
        {
            _key(VarKind.BLOCK, "B00001"): 1.0,
            _key(VarKind.FLOW, "B00001", "D1"): 2.0,
        },
    ),
}


@pytest.fixture
def shuttle_plan(shuttle, shuttle_network, shuttle_catalog):
    """Factory returning (built model, optimal plan) for a formulation of the shuttle."""

    def make(formulation=Formulation.SSNDRM):
        built = build_model(formulation, shuttle, shuttle_catalog, shuttle_network)
        objective, nonzero = SHUTTLE_OPTIMA[formulation]
        values = {key: nonzero.get(key, 0.0) for key, _ in built.registry.pairs}
        plan = PlanSolution(formulation, values, objective, gap=0.0, instance_fingerprint=built.instance_fingerprint)
        return built, plan

    return make
