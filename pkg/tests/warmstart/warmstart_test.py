import json
from unittest.mock import MagicMock

import pytest

from railplan.blocks import generate_blocks
from railplan.formulations import Formulation, build_model
from railplan.generator import duplicate_as_extras
from railplan.milp import SolveResult, SolveStatus
from railplan.network import build_network
from railplan.warmstart import (
    VariablePartition,
    WarmStartConfig,
    cold_solve,
    compute_warm_start,
    solve_with_warm_start,
)


@pytest.fixture
def failing_backend():
    backend = MagicMock()
    backend.solve.return_value = SolveResult(SolveStatus.INFEASIBLE, message="no plan")
    return backend


class TestPartition:
    def test_partition_covers_every_column_once(self, shuttle_plan):
        built, _ = shuttle_plan(Formulation.SSNDRM)
        partition = VariablePartition.from_built(built)
        assert partition.is_partition_of(built.model)
        assert [name for name, _ in partition.groups] == ["design", "fleet"]
        assert partition.extra == ()

    def test_reordered_groups(self, shuttle_plan):
        built, _ = shuttle_plan(Formulation.SSNDRM)
        partition = VariablePartition.from_built(built, ("fleet", "design"))
        assert [name for name, _ in partition.groups] == ["fleet", "design"]
        assert partition.is_partition_of(built.model)

    def test_bad_group_order(self, shuttle_plan):
        built, _ = shuttle_plan(Formulation.SSNDRM)
        with pytest.raises(ValueError):
            VariablePartition.from_built(built, ("design",))


class TestWarmStartConfig:
    def test_stage_time_limit_is_a_quarter(self):
        config = WarmStartConfig(time_limit=600)
        assert config.stage_options().time_limit == 150
        assert config.final_options().time_limit == 600

    def test_from_planning(self, shuttle):
        config = WarmStartConfig.from_planning(shuttle.config, threads=4)
        assert config.epsilon == 1e-5
        assert config.gap_target == 0.025
        assert config.threads == 4


class TestFailures:
    def test_relaxation_failure(self, shuttle_plan, failing_backend):
        """Test an infeasible relaxation stops the warm start at its first stage"""
        built, _ = shuttle_plan(Formulation.SSNDRM)
        outcome = compute_warm_start(built, backend=failing_backend)
        assert not outcome.success
        assert outcome.failed_stage == "relaxation"
        assert outcome.assignment == {}
        assert failing_backend.solve.call_count == 1

    def test_backend_exception_is_a_failed_stage(self, shuttle_plan):
        built, _ = shuttle_plan(Formulation.SSNDRM)
        backend = MagicMock()
        backend.solve.side_effect = RuntimeError("solver crashed")
        outcome = compute_warm_start(built, backend=backend)
        assert outcome.failed_stage == "relaxation"
        assert outcome.stages[0].status is SolveStatus.ERROR

    def test_failed_warm_start_falls_back_to_cold_solve(self, shuttle_plan, failing_backend):
        """Test a failed warm start still runs the exact solve and reports the failure"""
        built, _ = shuttle_plan(Formulation.SSNDRM)
        result = solve_with_warm_start(built, backend=failing_backend)
        assert failing_backend.solve.call_count == 2
        final_options = failing_backend.solve.call_args[0][1]
        assert final_options.warm_start is None
        assert result.warm_start.failed_stage == "relaxation"
        assert not result.warm_start.success

    def test_cold_solve_has_no_summary(self, shuttle_plan, failing_backend):
        built, _ = shuttle_plan(Formulation.UNRESTRICTED_LOADING)
        assert cold_solve(built, backend=failing_backend).warm_start is None


class TestWarmStartWithCbc:
    def test_stages_and_objective(self, shuttle_plan, cbc):
        built, _ = shuttle_plan(Formulation.SSNDRM)
        outcome = compute_warm_start(built, WarmStartConfig(gap_target=0.0), backend=cbc)
        assert outcome.success
        assert [stage.name for stage in outcome.stages] == ["relaxation", "design", "fleet"]
        assert outcome.objective >= 4075.0 - 1e-6
        log = json.loads(outcome.stage_log_json())
        assert log["success"] is True
        assert len(log["stages"]) == 3

    def test_fixing_only_sets_zeros(self, shuttle_plan, cbc):
        """Test every column pinned by a stage is pinned at zero"""
        built, _ = shuttle_plan(Formulation.SSNDRM)
        outcome = compute_warm_start(built, backend=cbc)
        for model in outcome.models:
            for var in model.variables:
                original = built.model.variable(var.id)
                if (var.lower, var.upper) != (original.lower, original.upper):
                    assert var.lower == var.upper == 0.0

    def test_extras_stage_runs_first(self, shuttle, cbc):
        instance = duplicate_as_extras(shuttle)
        network = build_network(instance)
        built = build_model(Formulation.SSNDRM, instance, generate_blocks(instance, network), network)
        outcome = compute_warm_start(built, backend=cbc)
        assert outcome.success
        assert [stage.name for stage in outcome.stages] == ["relaxation", "extras", "design", "fleet"]

    def test_final_solve_matches_optimum(self, shuttle_plan, cbc):
        built, _ = shuttle_plan(Formulation.SSNDRM)
        result = solve_with_warm_start(built, WarmStartConfig(gap_target=0.0), backend=cbc)
        assert result.objective == pytest.approx(4075.0)
        assert result.warm_start.success
        assert result.warm_start.solves == 3
        assert result.root_gap is not None

    def test_broken_final_solve_keeps_warm_start(self, shuttle_plan, cbc):
        """Test the warm-start incumbent survives when the exact solve returns nothing"""
        built, _ = shuttle_plan(Formulation.SSNDRM)
        backend = MagicMock()
        backend.solve.side_effect = lambda model, options: (
            SolveResult(SolveStatus.ERROR, message="lost") if options.warm_start else cbc.solve(model, options)
        )
        result = solve_with_warm_start(built, backend=backend)
        assert result.status is SolveStatus.FEASIBLE_AT_LIMIT
        assert result.objective == pytest.approx(result.warm_start.objective)
        assert set(result.values) == {var.id for var in built.model.variables}
