"""Reported metrics for audited plans and the CSV/JSON report set."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict
from pydantic.alias_generators import to_camel

from .audit import PlanSolution, leg_loads
from .blocks import BlockCatalog
from .errors import FingerprintMismatch, ReportError
from .formulations import Formulation
from .instance import ContainerType, Instance, PlatformType
from .milp import VarKind

logger = logging.getLogger(__name__)

PLATFORM_COUNTS = (1, 3, 5)

COMPUTATIONAL_COLUMNS = [
    "instance", "scenario", "seed", "formulation", "extras", "warmStart", "status",
    "objective", "gap", "rootGap", "warmStartObjective", "warmStartSeconds", "totalSeconds", "timedOut",
]
COMPARISON_COLUMNS = [
    "instance", "scenario", "seed", "extras", "warmStart", "formulation",
    "objective", "totalSeconds", "unsatisfiedDemandPct", "capacityUsagePct", "usageDiffPct",
]
FLEET_COLUMNS = [
    "instance", "scenario", "seed", "extras", "formulation", "extraTrains", "platforms", "railcars",
    "slotUsedPct", "loadedSlotUsedPct", "pct53Platforms", "pct1Platforms", "pct3Platforms", "pct5Platforms",
]


class _Report(BaseModel):
    model_config = ConfigDict(frozen=True, alias_generator=to_camel, populate_by_name=True)


class ScatterRow(_Report):
    block: str
    ratio40_platforms: float
    ratio40_containers: float
    slot_utilization: float


class AsymmetryRow(_Report):
    terminals: tuple[str, str]
    forward_volume: int
    backward_volume: int
    asymmetry_pct: float


class OdShareRow(_Report):
    origin: str
    destination: str
    volume: int
    share40: float


class DemandProfile(_Report):
    asymmetry: tuple[AsymmetryRow, ...] = ()
    od_shares: tuple[OdShareRow, ...] = ()


class MetricsReport(_Report):
    formulation: Formulation
    instance_fingerprint: str
    status: str
    objective: float | None
    gap: float | None = None
    root_gap: float | None = None
    warm_start_objective: float | None = None
    warm_start_seconds: float | None = None
    total_seconds: float | None = None
    unsatisfied_demand_pct: float
    capacity_usage: float
    usage_diff_vs_reference: float | None = None
    slot_utilization_pct: float | None = None
    loaded_slot_utilization_pct: float | None = None
    extra_train_count: int = 0
    platform_count: int | None = None
    railcar_count: int | None = None
    pct53_platforms: float | None = None
    pct1_platforms: float | None = None
    pct3_platforms: float | None = None
    pct5_platforms: float | None = None
    per_block_scatter: tuple[ScatterRow, ...] = ()
    demand_profile: DemandProfile = DemandProfile()

    @property
    def timed_out(self) -> bool:
        return self.status == "feasibleAtLimit"


def _pct(part: float, whole: float) -> float:
    return 100.0 * part / whole if whole > 0 else 0.0


def demand_profile(instance: Instance) -> DemandProfile:
    """Per unordered terminal pair the volume asymmetry, and per OD pair the 40-ft share."""
    volumes: dict[tuple[str, str], dict[ContainerType, int]] = defaultdict(lambda: defaultdict(int))
    for demand in instance.demands:
        volumes[(demand.origin, demand.destination)][demand.container_type] += demand.volume
    totals = {od: sum(by_type.values()) for od, by_type in volumes.items()}
    asymmetry = []
    for a, b in sorted({tuple(sorted(od)) for od in totals}):
        forward, backward = totals.get((a, b), 0), totals.get((b, a), 0)
        asymmetry.append(
            AsymmetryRow(
                terminals=(a, b),
                forward_volume=forward,
                backward_volume=backward,
                asymmetry_pct=_pct(abs(forward - backward), forward + backward),
            )
        )
    shares = [
        OdShareRow(
            origin=od[0],
            destination=od[1],
            volume=totals[od],
            share40=volumes[od][ContainerType.T40] / totals[od],
        )
        for od in sorted(totals)
    ]
    return DemandProfile(asymmetry=tuple(asymmetry), od_shares=tuple(shares))


def capacity_usage(solution: PlanSolution, instance: Instance, catalog: BlockCatalog) -> float:
    """Used feet times distance over offered feet times distance, legs of selected trains only."""
    loads = leg_loads(solution, instance, catalog)
    used = offered = 0.0
    for service in instance.services:
        if service.is_extra and solution.value(VarKind.EXTRA, service.id) < 0.5:
            continue
        for leg_index, leg in enumerate(service.legs):
            used += loads.get((service.id, leg_index), 0.0) * leg.distance
            offered += leg.capacity * leg.distance
    return _pct(used, offered)


def _containers(solution: PlanSolution, instance: Instance, catalog: BlockCatalog, block_id: str) -> dict[ContainerType, float]:
    carried = dict.fromkeys(ContainerType, 0.0)
    for demand_id in catalog.demands_for_block.get(block_id, ()):
        carried[instance.demand(demand_id).container_type] += solution.value(VarKind.FLOW, block_id, demand_id)
    return carried


def _slot_metrics(solution: PlanSolution, instance: Instance, catalog: BlockCatalog):
    containers = slots = loaded_slots = 0.0
    scatter = []
    for block in catalog.blocks:
        if solution.value(VarKind.BLOCK, block.id) < 0.5:
            continue
        carried = _containers(solution, instance, catalog, block.id)
        platforms = platforms40 = loaded_platforms = 0.0
        for car in instance.railcars:
            loaded = solution.value(VarKind.LOADED_CARS, block.id, car.id)
            cars = loaded + solution.value(VarKind.EMPTY_CARS, block.id, car.id)
            platforms += car.platform_count * cars
            loaded_platforms += car.platform_count * loaded
            if car.platform_type is PlatformType.P40:
                platforms40 += car.platform_count * cars
        total = sum(carried.values())
        containers += total
        slots += 2 * platforms
        loaded_slots += 2 * loaded_platforms
        if platforms > 0 and total > 0:
            scatter.append(
                ScatterRow(
                    block=block.id,
                    ratio40_platforms=platforms40 / platforms,
                    ratio40_containers=carried[ContainerType.T40] / total,
                    slot_utilization=min(1.0, total / (2 * platforms)),
                )
            )
    slot_pct = _pct(containers, slots) if slots > 0 else None
    loaded_pct = _pct(containers, loaded_slots) if loaded_slots > 0 else None
    return slot_pct, loaded_pct, tuple(scatter)


def _fleet_metrics(solution: PlanSolution, instance: Instance) -> dict:
    allocation = solution.of_kind(VarKind.ALLOCATION)
    if not allocation:
        return {}
    cars = defaultdict(float)
    for (car_id, _terminal), value in allocation.items():
        cars[car_id] += value
    platforms = sum(instance.railcar(car_id).platform_count * count for car_id, count in cars.items())
    by_platform_type = defaultdict(float)
    by_count = defaultdict(float)
    for car_id, count in cars.items():
        car = instance.railcar(car_id)
        by_platform_type[car.platform_type] += car.platform_count * count
        by_count[car.platform_count] += car.platform_count * count
    fleet = {
        "railcar_count": int(round(sum(cars.values()))),
        "platform_count": int(round(platforms)),
        "pct53_platforms": _pct(by_platform_type[PlatformType.P53], platforms),
    }
    for count in PLATFORM_COUNTS:
        fleet[f"pct{count}_platforms"] = _pct(by_count[count], platforms)
    return fleet


def compute_metrics(solution: PlanSolution, instance: Instance, catalog: BlockCatalog) -> MetricsReport:
    total_volume = sum(demand.volume for demand in instance.demands)
    unmet = sum(solution.value(VarKind.UNMET, demand.id) for demand in instance.demands)
    if solution.formulation is Formulation.UNRESTRICTED_LOADING:
        slot_pct, loaded_pct, scatter = None, None, ()
    else:
        slot_pct, loaded_pct, scatter = _slot_metrics(solution, instance, catalog)
    timings = solution.timings
    return MetricsReport(
        formulation=solution.formulation,
        instance_fingerprint=solution.instance_fingerprint or instance.fingerprint(),
        status=solution.status,
        objective=solution.objective,
        gap=solution.gap,
        root_gap=timings.get("rootGap"),
        warm_start_objective=timings.get("warmStartObjective"),
        warm_start_seconds=timings.get("warmStartSeconds"),
        total_seconds=timings.get("totalSeconds"),
        unsatisfied_demand_pct=_pct(unmet, total_volume),
        capacity_usage=capacity_usage(solution, instance, catalog),
        slot_utilization_pct=slot_pct,
        loaded_slot_utilization_pct=loaded_pct,
        extra_train_count=int(round(sum(solution.of_kind(VarKind.EXTRA).values()))),
        per_block_scatter=scatter,
        demand_profile=demand_profile(instance),
        **_fleet_metrics(solution, instance),
    )


def compute_metrics_batch(items: Sequence[tuple[PlanSolution, Instance, BlockCatalog]], n_jobs: int = 1) -> list[MetricsReport]:
    if n_jobs == 1 or len(items) < 2:
        return [compute_metrics(*item) for item in items]
    return Parallel(n_jobs=n_jobs)(delayed(compute_metrics)(*item) for item in items)


def usage_difference(reference: float, model: float) -> float | None:
    """Percent by which a model under-states the reference capacity usage."""
    if reference <= 0:
        return 0.0 if model <= 0 else None
    return (reference - model) / reference * 100.0


def compare_models(
    reports: Mapping[Formulation, MetricsReport], reference: Formulation = Formulation.SSNDRM
) -> dict[Formulation, MetricsReport]:
    """Fill each report's usage difference against the reference formulation on the same instance."""
    fingerprints = {report.instance_fingerprint for report in reports.values()}
    if len(fingerprints) > 1:
        raise FingerprintMismatch(f"cannot compare plans of {len(fingerprints)} different instances")
    base = reports.get(reference)
    compared = {}
    for formulation, report in sorted(reports.items(), key=lambda item: item[0].value):
        diff = None if base is None else usage_difference(base.capacity_usage, report.capacity_usage)
        compared[formulation] = report.model_copy(update={"usage_diff_vs_reference": diff})
    return compared


@dataclass(frozen=True)
class RunRecord:
    """One solved plan with the batch coordinates it belongs to."""

    instance: str
    report: MetricsReport
    scenario: int | None = None
    seed: int | None = None
    extras: bool = False
    warm_start: bool = True

    @property
    def group(self) -> tuple:
        return (self.instance, self.scenario if self.scenario is not None else -1, self.seed if self.seed is not None else -1, self.extras, self.warm_start)

    @property
    def sort_key(self) -> tuple:
        return (*self.group, self.report.formulation.value)


def _coordinates(record: RunRecord) -> dict:
    return {
        "instance": record.instance,
        "scenario": record.scenario,
        "seed": record.seed,
        "extras": record.extras,
    }


INTEGER_COLUMNS = ("scenario", "seed", "extraTrains", "platforms", "railcars")


def _frame(rows: list[dict], columns: list[str]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=columns)
    return frame.astype({name: "Int64" for name in INTEGER_COLUMNS if name in columns})


def computational_table(records: Iterable[RunRecord]) -> pd.DataFrame:
    rows = []
    for record in sorted(records, key=lambda r: r.sort_key):
        report = record.report
        rows.append(
            {
                **_coordinates(record),
                "formulation": report.formulation.value,
                "warmStart": record.warm_start,
                "status": report.status,
                "objective": report.objective,
                "gap": report.gap,
                "rootGap": report.root_gap,
                "warmStartObjective": report.warm_start_objective,
                "warmStartSeconds": report.warm_start_seconds,
                "totalSeconds": report.total_seconds,
                "timedOut": report.timed_out,
            }
        )
    return _frame(rows, COMPUTATIONAL_COLUMNS)


def comparison_table(records: Iterable[RunRecord]) -> pd.DataFrame:
    groups: dict[tuple, list[RunRecord]] = defaultdict(list)
    for record in records:
        groups[record.group].append(record)
    rows = []
    for key in sorted(groups):
        members = groups[key]
        compared = compare_models({r.report.formulation: r.report for r in members})
        for record in sorted(members, key=lambda r: r.sort_key):
            report = compared[record.report.formulation]
            rows.append(
                {
                    **_coordinates(record),
                    "warmStart": record.warm_start,
                    "formulation": report.formulation.value,
                    "objective": report.objective,
                    "totalSeconds": report.total_seconds,
                    "unsatisfiedDemandPct": report.unsatisfied_demand_pct,
                    "capacityUsagePct": report.capacity_usage,
                    "usageDiffPct": report.usage_diff_vs_reference,
                }
            )
    return _frame(rows, COMPARISON_COLUMNS)


def fleet_table(records: Iterable[RunRecord]) -> pd.DataFrame:
    rows = []
    for record in sorted(records, key=lambda r: r.sort_key):
        report = record.report
        if report.formulation is not Formulation.SSNDRM:
            continue
        rows.append(
            {
                **_coordinates(record),
                "formulation": report.formulation.value,
                "extraTrains": report.extra_train_count,
                "platforms": report.platform_count,
                "railcars": report.railcar_count,
                "slotUsedPct": report.slot_utilization_pct,
                "loadedSlotUsedPct": report.loaded_slot_utilization_pct,
                "pct53Platforms": report.pct53_platforms,
                "pct1Platforms": report.pct1_platforms,
                "pct3Platforms": report.pct3_platforms,
                "pct5Platforms": report.pct5_platforms,
            }
        )
    return _frame(rows, FLEET_COLUMNS)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def export_reports(records: Sequence[RunRecord], out_dir: str | Path, manifest: Mapping | None = None) -> dict[str, Path]:
    """Write the table CSVs, figure-data JSON and a manifest hashing every file."""
    out_dir = Path(out_dir)
    records = sorted(records, key=lambda r: r.sort_key)
    written: dict[str, Path] = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        tables = {
            "computational.csv": computational_table(records),
            "model_comparison.csv": comparison_table(records),
            "fleet_composition.csv": fleet_table(records),
        }
        for name, frame in tables.items():
            path = out_dir / name
            frame.to_csv(path, index=False, lineterminator="\n")
            written[name] = path

        profiles = {}
        for record in records:
            profiles.setdefault(record.instance, record.report.demand_profile.model_dump(by_alias=True, mode="json"))
        written["demand_profile.json"] = out_dir / "demand_profile.json"
        _write_json(written["demand_profile.json"], profiles)

        scatter = [
            {
                **_coordinates(record),
                "warmStart": record.warm_start,
                "formulation": record.report.formulation.value,
                "blocks": [row.model_dump(by_alias=True) for row in record.report.per_block_scatter],
            }
            for record in records
            if record.report.per_block_scatter
        ]
        written["block_scatter.json"] = out_dir / "block_scatter.json"
        _write_json(written["block_scatter.json"], scatter)

        files = {name: hashlib.sha256(path.read_bytes()).hexdigest() for name, path in sorted(written.items())}
        written["manifest.json"] = out_dir / "manifest.json"
        _write_json(written["manifest.json"], {**dict(manifest or {}), "files": files})
    except OSError as exc:
        raise ReportError(getattr(exc, "filename", None) or out_dir, exc.strerror or str(exc)) from exc
    logger.info("Wrote %d report files for %d runs to %s", len(written), len(records), out_dir)
    return written
