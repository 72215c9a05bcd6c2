import json
from pathlib import Path

import numpy as np
import pytest

from gnpbench.cli import (
    AGGREGATE_NAME,
    ConfigError,
    ExperimentConfig,
    _evaluate_check_thresholds,
    expand_config,
    load_trace,
    main,
    run_cells,
    write_aggregate,
)
from gnpbench.oracles import CSV_HEADER


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


TINY = {
    "method": "gnp", "n": 2, "d": 12, "r": 2, "kappa": 2.0, "pfail": 0.0,
    "seed": 4, "T": 120, "target_objective_gap": 1e-8,
}


class TestConfigExpansion:
    def test_grid_cardinality(self):
        doc = {"method": ["gnp", "polyak", "scaledsm"], "kappa": [1.0, 3.0, 10.0],
               "d": 10, "r": 2, "T": 5}
        cells, _ = expand_config(doc)
        assert len(cells) == 9
        assert {c.method for c in cells} == {"gnp", "polyak", "scaledsm"}

    def test_cells_share_seed_for_paired_comparisons(self):
        doc = {"method": ["gnp", "polyak"], "d": 10, "r": 2, "T": 5, "seed": 17}
        cells, _ = expand_config(doc)
        assert {c.seed for c in cells} == {17}

    def test_preset_expansion(self):
        cells, options = expand_config({"preset": "fig1-desk"})
        assert len(cells) == 4
        assert options["plot"]
        assert {(c.method, c.kappa) for c in cells} == {
            ("gnp", 1.0), ("gnp", 10.0), ("polyak", 1.0), ("polyak", 10.0)
        }

    def test_preset_override(self):
        cells, _ = expand_config({"preset": "fig1-desk", "d": 30, "T": 50})
        assert all(c.d == 30 and c.T == 50 for c in cells)

    def test_cells_with_grid(self):
        cells, _ = expand_config({"preset": "fig4-desk"})
        assert len(cells) == 4
        assert {(c.method, c.pfail) for c in cells} == {
            ("rgnp", 0.1), ("rgnp", 0.2), ("rpolyak", 0.1), ("rpolyak", 0.2)
        }
        rgnp_cells = [c for c in cells if c.method == "rgnp"]
        assert all(c.T == 200 and c.K == 50 for c in rgnp_cells)

    def test_seed_override(self):
        cells, _ = expand_config(dict(TINY), seed_override=99)
        assert cells[0].seed == 99

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            expand_config({"method": "gnp", "bogus": 1})

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError):
            expand_config({"preset": "fig9-desk"})

    def test_m_rule(self):
        order2 = ExperimentConfig(method="gnp", n=2, d=10, r=3)
        assert order2.resolved_m() == 8 * 10 * 3
        order3 = ExperimentConfig(method="gnp", n=3, d=10, r=3)
        assert order3.resolved_m() == 8 * 3 * 10 * 3
        explicit = ExperimentConfig(method="gnp", n=3, d=10, r=3, m=123)
        assert explicit.resolved_m() == 123

    def test_validation_rules(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(method="scaledsm", n=3, d=10, r=2).validate()
        with pytest.raises(ConfigError):
            ExperimentConfig(method="rgnp", d=10, r=2, K=5).validate()  # no h0
        with pytest.raises(ConfigError):
            ExperimentConfig(method="rgnp", d=10, r=2, h0=0.0).validate()  # no K
        with pytest.raises(ConfigError):
            ExperimentConfig(method="gnp", d=10, r=2, pfail=0.2).validate()
        with pytest.raises(ConfigError):
            ExperimentConfig(method="gnp", d=10, r=2, theta=0.3).validate()
        ExperimentConfig(method="rgnp", d=10, r=2, h0=0.0, K=3, pfail=0.2).validate()


class TestRunCommand:
    def test_run_writes_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, dict(TINY, out=str(tmp_path / "out")))
        assert main(["run", "--config", cfg]) == 0
        out = tmp_path / "out"
        csvs = list(out.glob("*.csv"))
        assert len(csvs) == 1
        trace = csvs[0].read_text().splitlines()
        assert trace[0] == ",".join(CSV_HEADER)
        label = csvs[0].stem
        assert (out / f"{label}.summary.json").exists()
        assert (out / f"{label}.timing.json").exists()
        assert (out / f"{label}.instance.json").exists()

    def test_run_twice_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, dict(TINY))
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        a = sorted((tmp_path / "a").glob("*.csv"))
        b = sorted((tmp_path / "b").glob("*.csv"))
        assert a and len(a) == len(b)
        for left, right in zip(a, b):
            assert left.read_bytes() == right.read_bytes()

    def test_seed_changes_trace(self, tmp_path):
        cfg = write_config(tmp_path, dict(TINY))
        main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
        a = next((tmp_path / "a").glob("*.csv")).read_bytes()
        b = next((tmp_path / "b").glob("*.csv")).read_bytes()
        assert a != b

    def test_row_count_is_iterations_plus_one(self, tmp_path):
        doc = dict(TINY, T=15)
        doc.pop("target_objective_gap")
        cfg = write_config(tmp_path, doc)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        trace = next((tmp_path / "out").glob("*.csv")).read_text().splitlines()
        assert len(trace) == 1 + 15 + 1  # header + steps + closing state row

    def test_summary_contents(self, tmp_path):
        cfg = write_config(tmp_path, dict(TINY))
        main(["run", "--config", cfg, "--out", str(tmp_path / "out")])
        summary = json.loads(next((tmp_path / "out").glob("*.summary.json")).read_text())
        assert summary["status"] == "ok"
        assert summary["m"] == 8 * 12 * 2
        assert summary["thresholds"]["1e-08"]["oracle_calls"] is not None
        assert summary["best_objective_gap"] <= 1e-8

    def test_config_error_exit_codes(self, tmp_path):
        bad = write_config(tmp_path, {"method": "scaledsm", "n": 3, "d": 8, "r": 2, "T": 5})
        assert main(["run", "--config", bad]) == 2
        missing = str(tmp_path / "nope.json")
        assert main(["run", "--config", missing]) == 2
        invalid = tmp_path / "invalid.json"
        invalid.write_text("{not json")
        assert main(["run", "--config", str(invalid)]) == 2

    def test_restart_staircase(self, tmp_path):
        doc = {"method": "rgnp", "n": 2, "d": 15, "r": 2, "kappa": 2.0, "pfail": 0.1,
               "seed": 6, "T": 60, "K": 8, "h0": 0.0, "max_oracle_calls": 2000}
        cfg = write_config(tmp_path, doc)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        trace = load_trace(next((tmp_path / "out").glob("*.csv")))
        summary = json.loads(next((tmp_path / "out").glob("*.summary.json")).read_text())
        rounds = [entry["k"] for entry in summary["restarts"]]
        assert rounds == sorted(rounds)
        assert len(rounds) >= 2
        bests = [entry["round_best"] for entry in summary["restarts"]]
        assert bests[-1] <= bests[0]


class TestSweepCommand:
    def test_grid_aggregate(self, tmp_path):
        doc = {"method": ["gnp", "polyak", "scaledsm"], "kappa": [1.0, 2.0, 3.0],
               "n": 2, "d": 10, "r": 2, "seed": 9, "T": 250,
               "target_objective_gap": 1e-6, "out": str(tmp_path / "sw")}
        cfg = write_config(tmp_path, doc)
        assert main(["sweep", "--config", cfg]) == 0
        aggregate = (tmp_path / "sw" / AGGREGATE_NAME).read_text().splitlines()
        assert len(aggregate) == 1 + 9
        header = aggregate[0].split(",")
        assert header[:3] == ["label", "method", "seed"]
        assert "calls_to_1e-06" in header

    def test_order_sweep_gnp_beats_polyak(self, tmp_path):
        # Censored comparison: the budget caps the baseline, which is enough
        # to witness that the preconditioned method needs fewer calls at
        # every order.
        doc = {"method": ["gnp", "polyak"], "n": [2, 3, 4], "d": 30, "r": 3,
               "kappa": 3.0, "seed": 21, "T": 400, "max_oracle_calls": 400,
               "target_objective_gap": 1e-6, "out": str(tmp_path / "sw")}
        cfg = write_config(tmp_path, doc)
        assert main(["sweep", "--config", cfg]) == 0
        calls = _calls_by_cell(tmp_path / "sw", key=lambda c: (c["method"], c["n"]))
        for order in ("2", "3", "4"):
            gnp_calls = calls[("gnp", order)]
            polyak_calls = calls[("polyak", order)]
            assert gnp_calls is not None
            assert polyak_calls is None or gnp_calls < polyak_calls

    def test_rank_sweep_gnp_beats_polyak(self, tmp_path):
        doc = {"method": ["gnp", "polyak"], "r": [2, 4], "n": 3, "d": 25,
               "kappa": 3.0, "seed": 23, "T": 400, "max_oracle_calls": 400,
               "target_objective_gap": 1e-6, "out": str(tmp_path / "sw")}
        cfg = write_config(tmp_path, doc)
        assert main(["sweep", "--config", cfg]) == 0
        calls = _calls_by_cell(tmp_path / "sw", key=lambda c: (c["method"], c["r"]))
        for rank in ("2", "4"):
            gnp_calls = calls[("gnp", rank)]
            polyak_calls = calls[("polyak", rank)]
            assert gnp_calls is not None
            assert polyak_calls is None or gnp_calls < polyak_calls

    def test_cell_failure_isolated(self, tmp_path, monkeypatch):
        import gnpbench.solvers as solver_mod

        def boom(*args, **kwargs):
            raise solver_mod.SolverError("injected failure")

        monkeypatch.setattr(solver_mod, "scaled_sm", boom)
        cells, _ = expand_config({"cells": [
            {"method": "gnp", "n": 2, "d": 10, "r": 2, "T": 20, "seed": 1},
            {"method": "scaledsm", "n": 2, "d": 10, "r": 2, "T": 20, "seed": 1},
        ]})
        out = tmp_path / "out"
        artifacts, failures = run_cells(cells, out)
        assert len(artifacts) == 1
        assert len(failures) == 1
        failed_label = failures[0][0]
        assert (out / f"{failed_label}.error.json").exists()
        # the healthy cell still produced its artifacts
        assert artifacts[0]["config"].method == "gnp"
        assert Path(artifacts[0]["trace_csv"]).exists()

    def test_aggregate_deterministic(self, tmp_path):
        doc = {"method": ["gnp"], "kappa": [1.0, 2.0], "n": 2, "d": 10, "r": 2,
               "seed": 9, "T": 100, "target_objective_gap": 1e-6}
        cfg = write_config(tmp_path, doc)
        main(["sweep", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["sweep", "--config", cfg, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / AGGREGATE_NAME).read_bytes() == \
            (tmp_path / "b" / AGGREGATE_NAME).read_bytes()


def _calls_by_cell(out_dir: Path, key):
    import csv

    with open(out_dir / AGGREGATE_NAME) as fh:
        rows = list(csv.DictReader(fh))
    return {
        key(row): (int(row["calls_to_1e-06"]) if row["calls_to_1e-06"] else None)
        for row in rows
    }


class TestCheckCommand:
    def test_check_small_passes(self, tmp_path):
        cfg = write_config(tmp_path, {"preset": "check-small", "out": str(tmp_path / "chk")})
        assert main(["check", "--config", cfg]) == 0
        report = json.loads((tmp_path / "chk" / "check.json").read_text())
        assert report["passed"]
        assert report["finite_difference"]["max_rel_error"] <= 1e-4
        assert report["constant_rank"]["constant"]
        assert report["sharpness"]["mu_hat"] > 0
        assert report["rate"]["aiming_violations"] == 0
        assert set(report["constant_rank"]["candidates"]) == {"r(r+1)/2", "d*r - r(r-1)/2"}

    def test_check_rejects_oversized(self, tmp_path):
        cfg = write_config(tmp_path, {"method": "gnp", "n": 2, "d": 100, "r": 30, "T": 5})
        assert main(["check", "--config", cfg]) == 2

    def test_threshold_evaluation_rules(self):
        good = {
            "finite_difference": {"max_rel_error": 1e-6},
            "constant_rank": {"constant": True, "ambiguous_points": 0, "ranks": [7]},
            "sharpness": {"mu_hat": 0.5},
        }
        assert _evaluate_check_thresholds(good) == []
        bad_fd = json.loads(json.dumps(good))
        bad_fd["finite_difference"]["max_rel_error"] = 1e-2
        assert any("finite-difference" in msg for msg in _evaluate_check_thresholds(bad_fd))
        bad_rank = json.loads(json.dumps(good))
        bad_rank["constant_rank"]["constant"] = False
        assert any("rank" in msg for msg in _evaluate_check_thresholds(bad_rank))
        bad_sharp = json.loads(json.dumps(good))
        bad_sharp["sharpness"]["mu_hat"] = -1.0
        assert any("sharpness" in msg for msg in _evaluate_check_thresholds(bad_sharp))


class TestPlotCommand:
    def test_empty_directory_no_file(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["plot", "--in", str(empty), "--x", "oracle_calls", "--y", "obj_gap"]) == 0
        assert "nothing to plot" in capsys.readouterr().out
        assert not list(empty.glob("*.svg"))

    def test_single_run_plot(self, tmp_path):
        cfg = write_config(tmp_path, dict(TINY, out=str(tmp_path / "out")))
        main(["run", "--config", cfg])
        assert main(["plot", "--in", str(tmp_path / "out"),
                     "--x", "oracle_calls", "--y", "obj_gap"]) == 0
        svg = tmp_path / "out" / "plot_obj_gap_vs_oracle_calls.svg"
        assert svg.exists()
        assert b"<svg" in svg.read_bytes()

    def test_time_axis_uses_sidecar(self, tmp_path):
        cfg = write_config(tmp_path, dict(TINY, out=str(tmp_path / "out")))
        main(["run", "--config", cfg])
        assert main(["plot", "--in", str(tmp_path / "out"),
                     "--x", "time", "--y", "obj_gap"]) == 0
        assert (tmp_path / "out" / "plot_obj_gap_vs_time.svg").exists()

    def test_missing_sidecar_reported(self, tmp_path):
        cfg = write_config(tmp_path, dict(TINY, out=str(tmp_path / "out")))
        main(["run", "--config", cfg])
        for sidecar in (tmp_path / "out").glob("*.timing.json"):
            sidecar.unlink()
        assert main(["plot", "--in", str(tmp_path / "out"),
                     "--x", "time", "--y", "obj_gap"]) == 1

    def test_preset_comparison_plot_from_run(self, tmp_path):
        doc = {"preset": "fig1-desk", "d": 15, "r": 2, "T": 150,
               "max_oracle_calls": 150, "out": str(tmp_path / "out")}
        cfg = write_config(tmp_path, doc)
        assert main(["run", "--config", cfg]) == 0
        svg = tmp_path / "out" / "fig1-desk_obj_gap_vs_oracle_calls.svg"
        assert svg.exists()

    def test_load_trace_rejects_foreign_csv(self, tmp_path):
        foreign = tmp_path / "foreign.csv"
        foreign.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            load_trace(foreign)
