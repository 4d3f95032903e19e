import json
from pathlib import Path

import numpy as np
import pytest

from metricslope import harness
from metricslope.cli import main
from metricslope.diagnostics import trace_from_csv
from metricslope.errors import ConfigError, InvalidArgumentError
from metricslope.harness import (EXIT_CONFIG, EXIT_FAIL, EXIT_PASS, OUTPUT_DIR_ENV, PROBLEMS,
                                 ExperimentConfig, ProblemEntry, ReportRow, emit_report,
                                 exit_code, make_row, parse_report, register_problem,
                                 registry_list, run_experiment)
from metricslope.solvers import power_objective

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def cfg(**kw):
    d = {"problem_id": "power_p2", "solver_id": "prox_point", "checks": ["basic_descent"]}
    d.update(kw)
    return d


def write(tmp_path, d, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture
def outdir(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(out))
    return out


@pytest.fixture
def plugin():
    entry = ProblemEntry("zz_power_p3", "objective", lambda: power_objective(3.0), (1.0,),
                         ("prox_point",), "f(x) = |x|^3", (0.0,))
    register_problem(entry)
    yield entry
    del PROBLEMS[entry.problem_id]


class TestRegistry:
    def test_builtins(self):
        ids = registry_list()["problems"]
        for pid in ("power_p1", "power_p1.5", "power_p2", "power_p4", "composite_sharp",
                    "unit_disk_linear", "two_ball_linear"):
            assert pid in ids

    def test_sorted_and_deterministic(self):
        a = registry_list()
        assert all(v == sorted(v) for v in a.values()) and a == registry_list()

    def test_plugin_grows_list(self):
        before = len(registry_list()["problems"])
        entry = ProblemEntry("aa_tmp", "objective", lambda: power_objective(2.0), (1.0,),
                             ("prox_point",))
        register_problem(entry)
        try:
            assert len(registry_list()["problems"]) == before + 1
            with pytest.raises(InvalidArgumentError):
                register_problem(entry)
        finally:
            del PROBLEMS["aa_tmp"]

    def test_plugin_unknown_solver(self):
        with pytest.raises(InvalidArgumentError):
            register_problem(ProblemEntry("bad", "objective", lambda: None, (1.0,), ("newton",)))

    def test_plugin_runs(self, plugin, outdir):
        _, rows = run_experiment(ExperimentConfig.from_dict(cfg(problem_id=plugin.problem_id)))
        assert exit_code(rows) == EXIT_PASS


class TestConfig:
    @pytest.mark.parametrize("bad", [
        {"solver_id": "prox_point"},
        cfg(problem_id="nope"),
        cfg(solver_id="newton"),
        cfg(solver_id="moving_balls"),
        cfg(checks=["no_such_check"]),
        cfg(stop={"max_iter": 0}),
        cfg(stop={"step_tol": -1}),
        cfg(x0=[1.0, 2.0]),
        cfg(solver_params={"beta": 1}),
        cfg(colour="red"),
    ])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_cli_config_error_no_outputs(self, tmp_path, outdir, capsys):
        assert main(["run", write(tmp_path, cfg(problem_id="nope"))]) == EXIT_CONFIG
        assert "unknown problem" in capsys.readouterr().err
        assert not outdir.exists()

    def test_cli_unreadable(self, tmp_path, outdir):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", str(bad)]) == EXIT_CONFIG
        assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_defaults(self):
        c = ExperimentConfig.from_dict(cfg())
        assert c.stop == harness.DEFAULT_STOP and c.seed == 0

    def test_output_dir_precedence(self, monkeypatch):
        c = ExperimentConfig.from_dict(cfg(output_dir="somewhere"))
        monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
        assert c.resolved_output_dir() == Path("somewhere")
        assert ExperimentConfig.from_dict(cfg()).resolved_output_dir() == Path("out/power_p2")
        monkeypatch.setenv(OUTPUT_DIR_ENV, "/tmp/x")
        assert c.resolved_output_dir() == Path("/tmp/x")

    def test_shipped_configs_valid(self):
        paths = sorted(CONFIGS.glob("*.json"))
        assert paths
        for p in paths:
            harness.load_config(p)


class TestReport:
    rows = [ReportRow("a", "pass", 0.0, 1e-9, {"z": 1, "b": np.float64(2.5)}),
            ReportRow("b", "fail", -0.5, 1e-9, {"inf": float("inf")})]

    def test_text(self):
        assert emit_report(self.rows, "text") == "a pass 0.000000e+00\nb fail -5.000000e-01\n"

    def test_json_roundtrip(self):
        text = emit_report(self.rows, "json", {"problem_id": "p", "solver_id": "s"})
        back = parse_report(text)
        assert [r.check_id for r in back] == ["a", "b"]
        assert back[0].details == {"b": 2.5, "z": 1}
        assert back[1].details == {"inf": "inf"}
        assert emit_report(back, "json", {"problem_id": "p", "solver_id": "s"}) == text

    def test_key_order_stable(self):
        doc = json.loads(emit_report(self.rows, "json"))
        assert list(doc["rows"][0]) == ["check_id", "status", "worst_margin", "tolerance",
                                        "details"]
        assert list(doc["rows"][0]["details"]) == ["b", "z"]

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            emit_report([], "text")

    def test_bad_format(self):
        with pytest.raises(InvalidArgumentError):
            emit_report(self.rows, "xml")

    def test_exit_codes(self):
        assert exit_code(self.rows[:1]) == EXIT_PASS
        assert exit_code(self.rows) == EXIT_FAIL

    @pytest.mark.parametrize("margin, tol, status", [
        (0.0, 0.0, "pass"), (-1e-10, 1e-9, "pass"), (-2e-9, 1e-9, "fail"),
        (None, 1.0, "fail"), (float("nan"), 1.0, "fail"), (float("-inf"), 1.0, "fail")])
    def test_status_rule(self, margin, tol, status):
        assert make_row("c", margin, tol, {}).status == status

    def test_negative_zero_folded(self):
        assert emit_report([make_row("c", -0.0, 0.0, {})]) == "c pass 0.000000e+00\n"


class TestRun:
    def test_power_p4(self, outdir):
        c = ExperimentConfig.from_dict({
            "problem_id": "power_p4", "solver_id": "prox_point",
            "stop": {"step_tol": 0, "max_iter": 10000},
            "checks": [{"id": "kl_fit", "params": {"expect_theta": 0.75}},
                       {"id": "rate_fit", "params": {"expect_slope": -2.0, "slope_tol": 0.2}}]})
        _, rows = run_experiment(c)
        assert exit_code(rows) == EXIT_PASS
        assert rows[0].details["theta_hat"] == pytest.approx(0.75, abs=0.05)

    @pytest.mark.parametrize("pid, regime", [("power_p1", "finite"), ("power_p1.5", "superlinear"),
                                             ("power_p2", "linear")])
    def test_reported_regime(self, pid, regime):
        c = ExperimentConfig.from_dict(cfg(problem_id=pid, checks=["kl_fit"]))
        _, rows = run_experiment(c, write=False)
        assert rows[0].details["regime"] == regime

    def test_unit_disk(self, outdir):
        c = ExperimentConfig.from_dict({"problem_id": "unit_disk_linear",
                                        "solver_id": "moving_balls",
                                        "checks": ["feasibility", "envelope_descent"]})
        _, rows = run_experiment(c)
        assert [r.status for r in rows] == ["pass", "pass"]
        assert {p.name for p in outdir.iterdir()} == {"trace.csv", "report.json", "report.txt"}

    def test_failing_check_exit_1(self, tmp_path, outdir, capsys):
        bad = cfg(checks=[{"id": "kl_fit", "params": {"expect_theta": 0.9}}])
        assert main(["run", write(tmp_path, bad)]) == EXIT_FAIL
        assert capsys.readouterr().out.startswith("kl_fit fail")

    def test_check_error_becomes_fail_row(self, outdir):
        # moving-balls feasibility on a prox trace: unsupported, reported not raised
        _, rows = run_experiment(ExperimentConfig.from_dict(cfg(checks=["feasibility"])))
        assert rows[0].status == "fail" and rows[0].worst_margin is None
        assert "error" in rows[0].details

    def test_trace_reloads_equal(self, outdir):
        trace, _ = run_experiment(ExperimentConfig.from_dict(cfg()))
        assert trace_from_csv((outdir / "trace.csv").read_text()) == trace

    def test_byte_identical(self, tmp_path, monkeypatch):
        path = str(CONFIGS / "composite_sharp.json")
        blobs = []
        for i in range(2):
            out = tmp_path / f"run{i}"
            monkeypatch.setenv(OUTPUT_DIR_ENV, str(out))
            assert main(["run", path]) == EXIT_PASS
            blobs.append({p.name: p.read_bytes() for p in out.iterdir()})
        assert blobs[0] == blobs[1] and len(blobs[0]) == 3

    def test_custom_composite(self, outdir):
        d = {"problem_id": "sq", "solver_id": "prox_linear", "solver_params": {"mu": 10.0},
             "checks": ["envelope_descent", "fixed_point"],
             "problems": {"sq": {"kind": "composite", "outer": "abs", "dim": 1, "M": 1.0,
                                 "G": [[[1.0, [2]], [-4.0, [0]]]], "x0": [3.0],
                                 "known_inf": 0.0, "minimizer": [2.0]}}}
        trace, rows = run_experiment(ExperimentConfig.from_dict(d))
        assert exit_code(rows) == EXIT_PASS
        assert trace.iterates[-1][0] == pytest.approx(2.0, abs=1e-8)

    def test_custom_nlp(self, outdir):
        disk = {"terms": [[1.0, [2, 0]], [1.0, [0, 2]], [-1.0, [0, 0]]], "L": 2.0}
        d = {"problem_id": "disk", "solver_id": "moving_balls",
             "checks": ["feasibility", "fixed_point"],
             "problems": {"disk": {"kind": "nlp", "dim": 2, "x0": [0.0, 0.5],
                                   "f": {"terms": [[1.0, [0, 1]]], "L": 1.0},
                                   "constraints": [disk]}}}
        trace, rows = run_experiment(ExperimentConfig.from_dict(d))
        assert exit_code(rows) == EXIT_PASS
        assert np.allclose(trace.iterates[-1], [0.0, -1.0], atol=1e-6)

    def test_custom_bad_problem(self):
        d = cfg(problem_id="x", problems={"x": {"kind": "cubic"}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(d)


class TestCli:
    def test_list(self, capsys):
        assert main(["list"]) == EXIT_PASS
        out = capsys.readouterr().out
        assert "  power_p2" in out and out.startswith("problems:")

    def test_list_json(self, capsys):
        assert main(["list", "--json"]) == EXIT_PASS
        assert json.loads(capsys.readouterr().out) == registry_list()

    def test_run_json(self, tmp_path, outdir, capsys):
        assert main(["run", write(tmp_path, cfg()), "--format", "json"]) == EXIT_PASS
        assert parse_report(capsys.readouterr().out)[0].check_id == "basic_descent"

    def test_check_roundtrip(self, tmp_path, outdir, capsys):
        c = write(tmp_path, cfg(checks=["basic_descent", "slope_descent"]))
        assert main(["run", c]) == EXIT_PASS
        ran = capsys.readouterr().out
        assert main(["check", str(outdir / "trace.csv"), "--against", c]) == EXIT_PASS
        assert capsys.readouterr().out == ran

    def test_check_against_stricter_config(self, tmp_path, outdir, capsys):
        assert main(["run", write(tmp_path, cfg())]) == EXIT_PASS
        strict = write(tmp_path, cfg(checks=[{"id": "kl_fit",
                                              "params": {"expect_theta": 0.9}}]), "s.json")
        assert main(["check", str(outdir / "trace.csv"), "--against", strict]) == EXIT_FAIL

    def test_check_bad_trace(self, tmp_path, capsys):
        bad = tmp_path / "t.csv"
        bad.write_text("garbage\n")
        assert main(["check", str(bad), "--against", write(tmp_path, cfg())]) == EXIT_CONFIG

    def test_module_entry(self, tmp_path, outdir):
        import subprocess
        import sys
        r = subprocess.run([sys.executable, "-m", "metricslope", "list"],
                           capture_output=True, text=True)
        assert r.returncode == 0 and "power_p2" in r.stdout
