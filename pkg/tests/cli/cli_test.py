import json
from pathlib import Path
from unittest.mock import patch

import pytest

from railplan.audit import PlanSolution, Violation
from railplan.cli import (
    EXIT_AUDIT,
    EXIT_OK,
    EXIT_SOLVE,
    EXIT_USAGE,
    UsageError,
    build_parser,
    error_record,
    load_run_config,
    main,
    parse_range,
)
from railplan.errors import SolveFailed
from railplan.formulations import Formulation
from railplan.instance import load_instance, save_instance
from railplan.milp import VarKey, VarKind


@pytest.fixture
def shuttle_file(shuttle, tmp_path):
    return save_instance(shuttle, tmp_path / "shuttle.json")


def run_config(*argv):
    return load_run_config(build_parser().parse_args([str(arg) for arg in argv]))


class TestArguments:
    def test_unknown_flag(self, capsys):
        assert main(["solve", "--bogus"]) == EXIT_USAGE
        assert "railplan-error code=1 kind=UsageError" in capsys.readouterr().err

    def test_missing_instance(self, capsys):
        """Test commands that plan on an instance refuse to run without one"""
        assert main(["blocks"]) == EXIT_USAGE
        assert "blocks needs --instance" in capsys.readouterr().err

    @pytest.mark.parametrize("text, expected", [("1-7", (1, 2, 3, 4, 5, 6, 7)), ("1,3", (1, 3)), ("5,1-2", (1, 2, 5))])
    def test_parse_range(self, text, expected):
        assert parse_range(text) == expected

    def test_backwards_range(self):
        with pytest.raises(ValueError):
            parse_range("4-2")

    def test_error_record_is_one_line(self):
        record = error_record(2, SolveFailed('ssndrm solve ended "infeasible"\nno plan'))
        assert record == "railplan-error code=2 kind=SolveFailed message=\"ssndrm solve ended 'infeasible' no plan\""

    def test_formulation_defaults(self, shuttle_file):
        assert run_config("solve", "--instance", shuttle_file).selected_formulations() == (Formulation.SSNDRM,)
        assert run_config("compare", "--instance", shuttle_file).selected_formulations() == tuple(Formulation)
        chosen = run_config("solve", "--instance", shuttle_file, "--formulation", "uf", "--formulation", "ul")
        assert chosen.formulations == (Formulation.UNRESTRICTED_FLEET, Formulation.UNRESTRICTED_LOADING)


class TestRunConfig:
    def test_flags_override_config_file(self, tmp_path):
        """Test camelCase config keys load and explicit flags win"""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 2, "outDir": str(tmp_path / "gen"), "fleetLimit": 5, "extras": False}))
        config = run_config("generate", "--config", path, "--seed", 4)
        assert config.seed == 4
        assert config.out_dir == tmp_path / "gen"
        assert config.fleet_limit == 5
        assert not config.extras

    def test_sweep_scenarios_from_config(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"scenarios": "2-4", "seeds": 3}))
        config = run_config("sweep", "--config", path)
        assert config.scenarios == (2, 3, 4)
        assert config.seeds == 3

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"solverName": "gurobi"}))
        with pytest.raises(UsageError) as err:
            run_config("generate", "--config", path)
        assert "solver_name" in str(err.value)

    def test_unreadable_config(self, tmp_path):
        with pytest.raises(UsageError):
            run_config("generate", "--config", tmp_path / "missing.json")

    def test_config_must_be_an_object(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("[1, 2]")
        with pytest.raises(UsageError):
            run_config("generate", "--config", path)

    def test_warm_start_overrides(self, shuttle, shuttle_file):
        config = run_config("solve", "--instance", shuttle_file, "--time-limit", 40, "--threads", 2)
        settings = config.warm_start_config(shuttle)
        assert settings.time_limit == 40
        assert settings.threads == 2
        assert settings.gap_target == 0.025


class TestGenerate:
    def test_writes_instance_and_manifest(self, tmp_path):
        out = tmp_path / "gen"
        argv = ["generate", "--seed", "3", "--scenario", "2", "--terminals", "4", "--services", "4", "--out-dir", str(out)]
        assert main(argv) == EXIT_OK
        instance = load_instance(out / "instance.json")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["sha256"] == instance.fingerprint()
        assert manifest["seed"] == 3
        assert "instance.json" in manifest["outputs"]
        assert [car.id for car in instance.railcars] == ["1x40", "1x53"]

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("one", "two"):
            assert main(["generate", "--seed", "9", "--out-dir", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "one" / "instance.json").read_bytes() == (tmp_path / "two" / "instance.json").read_bytes()


class TestBlocks:
    def test_writes_catalog_and_network(self, shuttle_file, tmp_path):
        out = tmp_path / "blocks"
        assert main(["blocks", "--instance", str(shuttle_file), "--out-dir", str(out)]) == EXIT_OK
        lines = (out / "catalog.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert (out / "network.dot").read_text().startswith("digraph")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["blocks"] == 2
        assert sorted(manifest["files"]) == ["catalog.jsonl", "network.dot", "network.json"]


class TestSolveAndAudit:
    def test_solve_then_audit(self, shuttle_file, tmp_path, cbc):
        out = tmp_path / "solve"
        argv = ["solve", "--instance", str(shuttle_file), "--out-dir", str(out), "--gap-target", "0", "--explain"]
        assert main(argv) == EXIT_OK
        solution = PlanSolution.load(out / "solution.json")
        assert solution.objective == pytest.approx(4075.0)
        assert json.loads((out / "stage_log.json").read_text())["success"] is True
        assert (out / "explain.tsv").exists()
        audit_argv = ["audit", "--instance", str(shuttle_file), "--solution", str(out / "solution.json"), "--out-dir", str(out)]
        assert main(audit_argv) == EXIT_OK
        assert json.loads((out / "audit.json").read_text())["violations"] == []

    def test_tampered_solution_fails_audit(self, shuttle_file, tmp_path, cbc):
        """Test dropping a used block from a solved plan exits with the audit code"""
        out = tmp_path / "solve"
        assert main(["solve", "--instance", str(shuttle_file), "--out-dir", str(out), "--no-warm-start"]) == EXIT_OK
        solution = PlanSolution.load(out / "solution.json")
        broken = solution.with_value(VarKey(VarKind.BLOCK, ("B00001",)), 0.0).save(tmp_path / "broken.json")
        audit_argv = ["audit", "--instance", str(shuttle_file), "--solution", str(broken), "--out-dir", str(out)]
        assert main(audit_argv) == EXIT_AUDIT
        families = {v["family"] for v in json.loads((out / "audit.json").read_text())["violations"]}
        assert "block_link" in families

    def test_solution_for_another_instance(self, shuttle, shuttle_file, shuttle_plan, tmp_path, capsys):
        _, plan = shuttle_plan(Formulation.SSNDRM)
        foreign = PlanSolution(plan.formulation, plan.values, plan.objective, instance_fingerprint="0" * 64)
        path = foreign.save(tmp_path / "foreign.json")
        argv = ["audit", "--instance", str(shuttle_file), "--solution", str(path), "--out-dir", str(tmp_path)]
        assert main(argv) == EXIT_USAGE
        assert "kind=FingerprintMismatch" in capsys.readouterr().err

    def test_compare_writes_tables(self, shuttle_file, tmp_path, cbc):
        out = tmp_path / "compare"
        assert main(["compare", "--instance", str(shuttle_file), "--out-dir", str(out), "--gap-target", "0"]) == EXIT_OK
        table = (out / "model_comparison.csv").read_text().splitlines()
        assert len(table) == 4
        assert Path(out / "manifest.json").exists()


class TestSweep:
    def test_scenario_by_seed_grid(self, tmp_path):
        """Test seven scenarios by five seeds produce 35 instances and one comparison table"""
        out = tmp_path / "sweep"
        argv = ["sweep", "--scenarios", "1-7", "--seeds", "5", "--no-extras", "--terminals", "4", "--services", "4", "--out-dir", str(out)]
        with patch("railplan.cli._plan_records", return_value=([], [], [])) as planned:
            assert main(argv) == EXIT_OK
        assert planned.call_count == 35
        assert len(list((out / "instances").glob("*.json"))) == 35
        assert (out / "model_comparison.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["inputs"]) == 35
        assert manifest["failures"] == []

    @pytest.mark.parametrize(
        "failures, audits, code",
        [([], [("s1-seed0/ul", 2)], EXIT_AUDIT), (["s1-seed0/uf: infeasible"], [("s1-seed0/ul", 2)], EXIT_SOLVE)],
    )
    def test_exit_code_follows_the_failure_kind(self, tmp_path, capsys, failures, audits, code):
        """Test audit findings exit with the audit code unless a solve also failed"""
        out = tmp_path / "sweep"
        argv = ["sweep", "--scenarios", "1", "--terminals", "4", "--services", "4", "--out-dir", str(out)]
        with patch("railplan.cli._plan_records", return_value=([], failures, audits)):
            assert main(argv) == code
        manifest = json.loads((out / "manifest.json").read_text())
        assert "s1-seed0/ul: 2 audit violations" in manifest["failures"]
        assert f"code={code}" in capsys.readouterr().err


class TestCompareAudit:
    def test_audit_violation_exits_with_audit_code(self, shuttle_file, tmp_path, cbc, capsys):
        out = tmp_path / "compare"
        broken = [Violation("block_link", "B00001/D1", 2.0, "2 > 0")]
        argv = ["compare", "--instance", str(shuttle_file), "--formulation", "ul", "--out-dir", str(out)]
        with patch("railplan.cli.audit_solution", return_value=broken):
            assert main(argv) == EXIT_AUDIT
        assert "kind=AuditFailed" in capsys.readouterr().err
        assert (out / "model_comparison.csv").exists()
