"""Command-line entry point.

    python -m railplan generate --seed 3 --scenario 2 --out-dir runs/gen
    python -m railplan solve --instance runs/gen/instance.json --formulation ssndrm --warm-start
    python -m railplan sweep --scenarios 1-7 --seeds 5 --no-extras --workers 4

Exit codes: 0 success, 1 usage or input error, 2 solve failure, 3 audit violations.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Sequence

from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
from pydantic.alias_generators import to_camel, to_snake

from . import __version__
from .audit import PlanSolution, audit_solution, cost_breakdown
from .backends import export_lp
from .blocks import BlockLimits, generate_blocks, save_catalog_jsonl
from .errors import AuditFailed, FingerprintMismatch, PlanError, ReportError, SolveFailed
from .formulations import BuiltModel, Formulation, build_model
from .generator import GeneratorSpec, SizeParams, file_sha256, generate_instance, generation_manifest, strip_extras, write_manifest
from .instance import Instance, load_instance, save_instance
from .metrics import RunRecord, compute_metrics, export_reports
from .milp import SolveResult
from .network import build_network, network_to_dot, save_network_json
from .warmstart import WarmStartConfig, cold_solve, solve_with_warm_start

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SOLVE = 2
EXIT_AUDIT = 3

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"
NEEDS_INSTANCE = {"blocks", "solve", "audit", "compare"}


class UsageError(Exception):
    pass


def parse_range(text: str) -> tuple[int, ...]:
    """``"1-7"`` or ``"1,3,5"`` into a sorted tuple of ints."""
    values: set[int] = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            low, high = (int(v) for v in part.split("-", 1))
            if low > high:
                raise ValueError(f"empty range {part}")
            values.update(range(low, high + 1))
        else:
            values.add(int(part))
    return tuple(sorted(values))


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", alias_generator=to_camel, populate_by_name=True)

    command: Literal["generate", "blocks", "solve", "audit", "compare", "sweep"]
    instance: Path | None = None
    solution: Path | None = None
    out_dir: Path = Path("runs")
    formulations: tuple[Formulation, ...] = ()
    extras: bool = True
    warm_start: bool = True
    gap_target: float | None = None
    time_limit: float | None = None
    threads: int | None = None
    max_transfers: int = 3
    max_elapsed: int | None = None
    seed: int = 0
    seeds: int = 1
    scenario: int | None = None
    scenarios: tuple[int, ...] = ()
    terminals: int = 5
    services: int = 6
    max_legs: int = 3
    od_pairs: int | None = None
    fleet_limit: int | None = None
    workers: int = 1
    explain: bool = False
    export_lp: bool = False

    @field_validator("scenarios", mode="before")
    @classmethod
    def _scenario_range(cls, value):
        if isinstance(value, (str, int)):
            return parse_range(str(value))
        return value

    @model_validator(mode="after")
    def _inputs_present(self) -> "RunConfig":
        if self.command in NEEDS_INSTANCE and self.instance is None:
            raise ValueError(f"{self.command} needs --instance")
        if self.command == "audit" and self.solution is None:
            raise ValueError("audit needs --solution")
        if self.seeds < 1 or self.workers < 1:
            raise ValueError("--seeds and --workers must be at least 1")
        return self

    def selected_formulations(self) -> tuple[Formulation, ...]:
        if self.formulations:
            return self.formulations
        if self.command in ("compare", "sweep"):
            return tuple(Formulation)
        return (Formulation.SSNDRM,)

    def block_limits(self) -> BlockLimits:
        return BlockLimits(max_transfers=self.max_transfers, max_elapsed=self.max_elapsed)

    def size(self) -> SizeParams:
        return SizeParams(terminals=self.terminals, services=self.services, max_legs=self.max_legs)

    def generator_spec(self, seed: int | None = None) -> GeneratorSpec:
        return GeneratorSpec(seed=self.seed if seed is None else seed, od_pairs=self.od_pairs, fleet_limit=self.fleet_limit)

    def warm_start_config(self, instance: Instance) -> WarmStartConfig:
        overrides = {
            name: value
            for name, value in (("gap_target", self.gap_target), ("time_limit", self.time_limit), ("threads", self.threads))
            if value is not None
        }
        return WarmStartConfig.from_planning(instance.config, **overrides)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="railplan", description="Intermodal rail tactical planning")
    parser.add_argument("--version", action="version", version=f"railplan {__version__}")
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="JSON run configuration; flags override it")
    common.add_argument("--out-dir", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    generation = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    generation.add_argument("--seed", type=int)
    generation.add_argument("--terminals", type=int)
    generation.add_argument("--services", type=int)
    generation.add_argument("--max-legs", type=int)
    generation.add_argument("--od-pairs", type=int)
    generation.add_argument("--fleet-limit", type=int)

    planning = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    planning.add_argument("--max-transfers", type=int)
    planning.add_argument("--max-elapsed", type=int)

    solving = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    solving.add_argument("--formulation", dest="formulations", action="append", choices=[f.value for f in Formulation])
    solving.add_argument("--warm-start", action=argparse.BooleanOptionalAction)
    solving.add_argument("--gap-target", type=float)
    solving.add_argument("--time-limit", type=float)
    solving.add_argument("--threads", type=int)

    extras = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    extras.add_argument("--extras", action=argparse.BooleanOptionalAction)

    instance = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    instance.add_argument("--instance", type=Path)

    commands = parser.add_subparsers(dest="command", required=True)
    gen = commands.add_parser("generate", parents=[common, generation, extras], help="write a seeded synthetic instance")
    gen.add_argument("--scenario", type=int, default=argparse.SUPPRESS)
    commands.add_parser("blocks", parents=[common, instance, planning], help="build the network and block catalog")
    solve = commands.add_parser("solve", parents=[common, instance, planning, solving, extras], help="solve one formulation")
    solve.add_argument("--explain", action="store_true", default=argparse.SUPPRESS)
    solve.add_argument("--export-lp", action="store_true", default=argparse.SUPPRESS)
    audit = commands.add_parser("audit", parents=[common, instance, planning], help="re-verify a solution")
    audit.add_argument("--solution", type=Path, default=argparse.SUPPRESS)
    commands.add_parser("compare", parents=[common, instance, planning, solving, extras], help="solve every formulation and compare")
    sweep = commands.add_parser("sweep", parents=[common, generation, planning, solving, extras], help="scenario x seed x formulation batch")
    sweep.add_argument("--scenarios", type=str, default=argparse.SUPPRESS)
    sweep.add_argument("--seeds", type=int, default=argparse.SUPPRESS)
    sweep.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    return parser


def load_run_config(namespace: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(namespace).items() if k not in ("config", "verbose", "quiet")}
    values: dict = {}
    config_path = getattr(namespace, "config", None)
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        values.update({to_snake(key): value for key, value in loaded.items()})
    values.update(flags)
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise UsageError(f"invalid run configuration: {where}: {first['msg']}") from exc


def configure_logging(namespace: argparse.Namespace) -> None:
    level = logging.INFO
    if getattr(namespace, "verbose", False):
        level = logging.DEBUG
    elif getattr(namespace, "quiet", False):
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT)


def error_record(code: int, exc: BaseException) -> str:
    message = " ".join(str(exc).split()).replace('"', "'")
    return f'railplan-error code={code} kind={type(exc).__name__} message="{message}"'


def _out_dir(config: RunConfig) -> Path:
    try:
        config.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(config.out_dir, exc.strerror or str(exc)) from exc
    return config.out_dir


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _manifest(config: RunConfig, inputs: dict[str, Path], **extra) -> dict:
    return {
        "toolVersion": __version__,
        "command": config.command,
        "config": config.model_dump(mode="json", by_alias=True),
        "inputs": {name: file_sha256(path) for name, path in sorted(inputs.items())},
        **extra,
    }


def _run_manifest(config: RunConfig, out_dir: Path, inputs: dict[str, Path], outputs: dict[str, Path], **extra) -> Path:
    files = {name: file_sha256(path) for name, path in sorted(outputs.items())}
    return write_manifest({**_manifest(config, inputs, **extra), "files": files}, out_dir / "manifest.json")


def _load_for_planning(config: RunConfig) -> Instance:
    instance = load_instance(config.instance)
    return instance if config.extras else strip_extras(instance)


def solve_formulation(instance: Instance, formulation: Formulation, config: RunConfig):
    """Network, catalog, model and solve for one formulation."""
    network = build_network(instance)
    catalog = generate_blocks(instance, network, config.block_limits())
    built = build_model(formulation, instance, catalog, network)
    settings = config.warm_start_config(instance)
    if config.warm_start:
        result = solve_with_warm_start(built, settings)
    else:
        result = cold_solve(built, settings)
    logger.info(
        "Solved %s: %s objective=%s gap=%s in %.2fs",
        formulation.value, result.status.value, result.objective, result.gap, result.wall_time,
    )
    return network, catalog, built, result


def _require_solution(result: SolveResult, formulation: Formulation) -> None:
    if not result.has_solution:
        raise SolveFailed(f"{formulation.value} solve ended {result.status.value}: {result.message or 'no plan'}")


def cmd_generate(config: RunConfig) -> int:
    out_dir = _out_dir(config)
    spec = config.generator_spec()
    instance = generate_instance(config.size(), spec, config.scenario, config.extras)
    path = save_instance(instance, out_dir / "instance.json")
    manifest = generation_manifest(instance, config.size(), spec, config.scenario, config.extras)
    write_manifest({**manifest, "toolVersion": __version__, "outputs": {"instance.json": file_sha256(path)}}, out_dir / "manifest.json")
    logger.info("Wrote %s (%d demands, %d services)", path, len(instance.demands), len(instance.services))
    return EXIT_OK


def cmd_blocks(config: RunConfig) -> int:
    out_dir = _out_dir(config)
    instance = _load_for_planning(config)
    network = build_network(instance)
    catalog = generate_blocks(instance, network, config.block_limits())
    outputs = {
        "catalog.jsonl": save_catalog_jsonl(catalog, out_dir / "catalog.jsonl"),
        "network.json": save_network_json(network, out_dir / "network.json"),
    }
    dot = out_dir / "network.dot"
    dot.write_text(network_to_dot(network), encoding="utf-8")
    outputs["network.dot"] = dot
    _run_manifest(config, out_dir, {"instance": config.instance}, outputs, blocks=len(catalog.blocks))
    return EXIT_OK


def cmd_solve(config: RunConfig) -> int:
    out_dir = _out_dir(config)
    instance = _load_for_planning(config)
    outputs: dict[str, Path] = {}
    failures = []
    for formulation in config.selected_formulations():
        suffix = "" if len(config.selected_formulations()) == 1 else f"_{formulation.value}"
        _network, _catalog, built, result = solve_formulation(instance, formulation, config)
        if config.explain:
            outputs[f"explain{suffix}.tsv"] = out_dir / f"explain{suffix}.tsv"
            outputs[f"explain{suffix}.tsv"].write_text(built.explain(), encoding="utf-8")
        if config.export_lp:
            outputs[f"model{suffix}.lp"] = export_lp(built.model, out_dir / f"model{suffix}.lp")
        outputs[f"solve_log{suffix}.json"] = _write_json(out_dir / f"solve_log{suffix}.json", result.log_record())
        if result.warm_start is not None:
            stage_log = {"success": result.warm_start.success, "failedStage": result.warm_start.failed_stage, "stages": list(result.warm_start.stages)}
            outputs[f"stage_log{suffix}.json"] = _write_json(out_dir / f"stage_log{suffix}.json", stage_log)
        if not result.has_solution:
            failures.append((formulation, result))
            continue
        outputs[f"solution{suffix}.json"] = PlanSolution.from_result(built, result).save(out_dir / f"solution{suffix}.json")
    _run_manifest(config, out_dir, {"instance": config.instance}, outputs)
    for formulation, result in failures:
        _require_solution(result, formulation)
    return EXIT_OK


def cmd_audit(config: RunConfig) -> int:
    out_dir = _out_dir(config)
    instance = _load_for_planning(config)
    solution = PlanSolution.load(config.solution)
    if solution.instance_fingerprint and solution.instance_fingerprint != instance.fingerprint():
        raise FingerprintMismatch("solution was produced for a different instance")
    network = build_network(instance)
    catalog = generate_blocks(instance, network, config.block_limits())
    built: BuiltModel = build_model(solution.formulation, instance, catalog, network)
    violations = audit_solution(solution, built, instance, catalog, network)
    report = {
        "formulation": solution.formulation.value,
        "violations": [
            {"family": v.family, "row": v.row, "magnitude": v.magnitude, "detail": v.detail} for v in violations
        ],
        "costs": cost_breakdown(solution, instance, catalog).to_dict(),
    }
    path = _write_json(out_dir / "audit.json", report)
    _run_manifest(config, out_dir, {"instance": config.instance, "solution": config.solution}, {"audit.json": path})
    if violations:
        for violation in violations[:20]:
            logger.warning("%s", violation)
        raise AuditFailed(len(violations))
    logger.info("Audit passed for %s over %d model rows", solution.formulation.value, len(built.model.constraints))
    return EXIT_OK


def _plan_records(instance: Instance, config: RunConfig, label: str, scenario: int | None = None, seed: int | None = None):
    """Solve, audit and measure every selected formulation; solve failures and audit findings come back apart."""
    records, failures, audits = [], [], []
    for formulation in config.selected_formulations():
        network, catalog, built, result = solve_formulation(instance, formulation, config)
        if not result.has_solution:
            failures.append(f"{label}/{formulation.value}: {result.status.value}")
            continue
        solution = PlanSolution.from_result(built, result)
        violations = audit_solution(solution, built, instance, catalog, network)
        if violations:
            audits.append((f"{label}/{formulation.value}", len(violations)))
        report = compute_metrics(solution, instance, catalog)
        records.append(RunRecord(label, report, scenario, seed, config.extras, config.warm_start))
    return records, failures, audits


def _failure_lines(failures: list[str], audits: list[tuple[str, int]]) -> list[str]:
    return failures + [f"{run}: {count} audit violations" for run, count in audits]


def _raise_failures(failures: list[str], audits: list[tuple[str, int]]) -> None:
    if failures:
        raise SolveFailed(f"{len(failures)} runs failed: {'; '.join(failures)}")
    if audits:
        for run, count in audits:
            logger.warning("%s breaks %d rules", run, count)
        raise AuditFailed(sum(count for _, count in audits))


def cmd_compare(config: RunConfig) -> int:
    out_dir = _out_dir(config)
    instance = _load_for_planning(config)
    records, failures, audits = _plan_records(instance, config, Path(config.instance).stem)
    manifest = _manifest(config, {"instance": config.instance}, failures=_failure_lines(failures, audits))
    export_reports(records, out_dir, manifest)
    _raise_failures(failures, audits)
    return EXIT_OK


def _sweep_task(config: RunConfig, scenario: int, seed: int, instance_dir: Path):
    instance = generate_instance(config.size(), config.generator_spec(seed), scenario, config.extras)
    label = f"s{scenario}-seed{seed}"
    save_instance(instance, instance_dir / f"{label}.json")
    return _plan_records(instance, config, label, scenario, seed)


def cmd_sweep(config: RunConfig) -> int:
    out_dir = _out_dir(config)
    instance_dir = out_dir / "instances"
    instance_dir.mkdir(parents=True, exist_ok=True)
    scenarios = config.scenarios or (1,)
    seeds = range(config.seed, config.seed + config.seeds)
    tasks = [(scenario, seed) for scenario in scenarios for seed in seeds]
    logger.info("Sweeping %d instances x %d formulations on %d workers", len(tasks), len(config.selected_formulations()), config.workers)
    outcomes = Parallel(n_jobs=config.workers)(
        delayed(_sweep_task)(config, scenario, seed, instance_dir) for scenario, seed in tasks
    )
    records = [record for batch, _, _ in outcomes for record in batch]
    failures = [failure for _, batch, _ in outcomes for failure in batch]
    audits = [audit for _, _, batch in outcomes for audit in batch]
    inputs = {f"instances/{path.name}": path for path in sorted(instance_dir.glob("*.json"))}
    export_reports(records, out_dir, _manifest(config, inputs, failures=_failure_lines(failures, audits)))
    _raise_failures(failures, audits)
    return EXIT_OK


HANDLERS = {
    "generate": cmd_generate,
    "blocks": cmd_blocks,
    "solve": cmd_solve,
    "audit": cmd_audit,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        namespace = parser.parse_args(argv)
        configure_logging(namespace)
        config = load_run_config(namespace)
        return HANDLERS[config.command](config)
    except UsageError as exc:
        print(error_record(EXIT_USAGE, exc), file=sys.stderr)
        return EXIT_USAGE
    except SolveFailed as exc:
        print(error_record(EXIT_SOLVE, exc), file=sys.stderr)
        return EXIT_SOLVE
    except AuditFailed as exc:
        print(error_record(EXIT_AUDIT, exc), file=sys.stderr)
        return EXIT_AUDIT
    except PlanError as exc:
        print(error_record(EXIT_USAGE, exc), file=sys.stderr)
        return EXIT_USAGE
