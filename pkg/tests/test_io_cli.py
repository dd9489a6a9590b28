"""File ingestion/validation, config handling, and the CLI workflow."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from forestsae import io
from forestsae.cli import main
from forestsae.simulate import SimScenario, simulate


@pytest.fixture(scope="module")
def sim_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("simdata")
    sc = SimScenario(n_plots=60, n_lidar=150, q=2, extent=(30.0, 30.0),
                     grid_spacing=3.0, line_spacing=10.0, along_spacing=0.4,
                     rng_seed=11)
    plots, lidar, cells, _ = simulate(sc)
    io.write_plots(root / "plots.csv", plots)
    io.write_lidar(root / "lidar.csv", lidar)
    io.write_cells(root / "cells.csv", cells)
    return root, plots, lidar, cells


class TestLoaders:
    def test_round_trip(self, sim_files):
        root, plots, lidar, cells = sim_files
        assert io.load_plots(root / "plots.csv") == plots
        assert io.load_lidar(root / "lidar.csv") == lidar
        assert io.load_cells(root / "cells.csv") == cells

    def test_well_formed_small_file(self, tmp_path):
        p = tmp_path / "plots.csv"
        p.write_text("id,x_km,y_km,stratum,y_mgha,x_ch_m,v_tc_pct\n"
                     "0,1.0,2.0,0,10.5,3.2,40\n"
                     "1,2.0,3.0,1,20.0,5.0,60\n"
                     "2,3.0,1.0,0,0.0,0.0,0\n")
        assert len(io.load_plots(p)) == 3

    def test_stratum_bound_rejected_with_line(self, tmp_path):
        p = tmp_path / "plots.csv"
        p.write_text("id,x_km,y_km,stratum,y_mgha,x_ch_m,v_tc_pct\n"
                     "0,1.0,2.0,0,10.5,3.2,40\n"
                     "1,2.0,3.0,2,20.0,5.0,60\n")
        with pytest.raises(io.ValidationError, match="line 3"):
            io.load_plots(p, n_strata=2)

    def test_errors_aggregated(self, tmp_path):
        p = tmp_path / "lidar.csv"
        p.write_text("id,x_km,y_km,stratum,x_ch_m,v_tc_pct\n"
                     "0,1.0,2.0,0,abc,40\n"
                     "1,2.0,3.0,0,1.0,150\n"
                     "2,x,3.0,0,1.0,50\n")
        with pytest.raises(io.ValidationError) as err:
            io.load_lidar(p)
        assert len(err.value.errors) == 3

    def test_missing_column(self, tmp_path):
        p = tmp_path / "cells.csv"
        p.write_text("id,x_km,y_km,stratum,v_tc_pct\n0,1,2,0,50\n")
        with pytest.raises(io.ValidationError, match="area_ha"):
            io.load_cells(p)

    def test_paper_scale_row_count(self, tmp_path):
        rows = ["id,x_km,y_km,stratum,y_mgha,x_ch_m,v_tc_pct"]
        rng = np.random.default_rng(0)
        for i in range(880):
            rows.append(f"{i},{rng.uniform(0, 100):.4f},"
                        f"{rng.uniform(0, 100):.4f},{i % 4},"
                        f"{rng.uniform(0, 300):.3f},{rng.uniform(0, 25):.3f},"
                        f"{rng.uniform(0, 100):.2f}")
        p = tmp_path / "plots.csv"
        p.write_text("\n".join(rows) + "\n")
        assert len(io.load_plots(p, n_strata=4)) == 880


class TestRunConfig:
    def base_doc(self, tmp_path):
        return {"version": 1, "seed": 3, "output": str(tmp_path / "out")}

    def test_fingerprint_stable_and_sensitive(self, tmp_path):
        doc = self.base_doc(tmp_path)
        f = tmp_path / "c.json"
        f.write_text(json.dumps(doc))
        a = io.RunConfig.from_file(f).fingerprint()
        b = io.RunConfig.from_file(f).fingerprint()
        assert a == b
        doc["seed"] = 4
        f.write_text(json.dumps(doc))
        assert io.RunConfig.from_file(f).fingerprint() != a

    def test_requires_seed_and_version(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"version": 1}))
        with pytest.raises(ValueError, match="seed"):
            io.RunConfig.from_file(f)
        f.write_text(json.dumps({"seed": 1}))
        with pytest.raises(ValueError, match="version"):
            io.RunConfig.from_file(f)

    def test_unknown_keys_rejected(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"version": 1, "seed": 1, "bogus": 2}))
        with pytest.raises(ValueError, match="bogus"):
            io.RunConfig.from_file(f)

    def test_table_round_trip(self, tmp_path):
        path = tmp_path / "t.csv"
        io.write_table(path, ["a", "b"], [[1.5, "x"], [2.25, "y"]],
                       fingerprint="cafe")
        fp, cols, rows = io.read_table(path)
        assert fp == "cafe"
        assert cols == ["a", "b"]
        assert rows[0]["a"] == "1.500000"


@pytest.fixture(scope="module")
def workflow(tmp_path_factory, sim_files):
    """Run the full command chain once on a small synthetic dataset."""
    root, *_ = sim_files
    out = tmp_path_factory.mktemp("run")
    cfg = {
        "version": 1, "seed": 21,
        "plots": str(root / "plots.csv"),
        "lidar": str(root / "lidar.csv"),
        "cells": str(root / "cells.csv"),
        "output": str(out),
        "model": "FULL",
        "neighbors": 6,
        "mcmc": {"n_iter": 400, "n_burn": 200, "thin": 2, "n_chains": 2},
        "stability_fractions": [1.0, 0.25],
    }
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    runner = CliRunner()
    for cmd in ("fit", "select", "predict", "estimate", "survey", "compare",
                "stability"):
        result = runner.invoke(main, [cmd, "--config", str(cfg_path)])
        assert result.exit_code == 0, f"{cmd} failed: {result.output}"
    return out, cfg_path, runner


class TestWorkflow:
    def test_outputs_exist_with_fingerprint(self, workflow):
        out, cfg_path, _ = workflow
        fp = io.RunConfig.from_file(cfg_path).fingerprint()
        for name in ("params_summary", "selection", "predictions",
                     "estimates", "survey", "comparison", "stability"):
            got, _, rows = io.read_table(out / f"{name}.csv")
            assert got == fp, name
            assert rows, name

    def test_checkpoints_per_chain(self, workflow):
        out, _, _ = workflow
        assert (out / "outcome_chain_0.pkl").exists()
        assert (out / "outcome_chain_1.pkl").exists()
        assert (out / "covariate_chain_0.pkl").exists()

    def test_selection_has_all_models(self, workflow):
        out, _, _ = workflow
        _, _, rows = io.read_table(out / "selection.csv")
        assert [r["model"] for r in rows] == \
            ["SM1", "SM2", "SM3", "SM4", "FULL", "FULL_NO_X"]

    def test_estimates_additive(self, workflow):
        out, _, _ = workflow
        _, _, rows = io.read_table(out / "estimates.csv")
        strata_total = sum(float(r["total_mean"]) for r in rows
                           if r["scope"] != "ALL")
        all_total = [float(r["total_mean"]) for r in rows
                     if r["scope"] == "ALL"][0]
        assert strata_total == pytest.approx(all_total, rel=1e-5)

    def test_stability_full_fraction_matches_estimate(self, workflow):
        out, _, _ = workflow
        _, _, est = io.read_table(out / "estimates.csv")
        _, _, stab = io.read_table(out / "stability.csv")
        dens_all = [r["density_mean"] for r in est if r["scope"] == "ALL"][0]
        assert stab[0]["density_mean"] == dens_all

    def test_missing_checkpoint_produces_json_error(self, tmp_path, workflow):
        _, cfg_path, runner = workflow
        result = runner.invoke(
            main, ["estimate", "--config", str(cfg_path), "--output",
                   str(tmp_path / "fresh")])
        assert result.exit_code == 1
        record = json.loads(result.output.strip().splitlines()[-1])
        assert record["error"] == "FileNotFoundError"

    def test_simulate_command(self, tmp_path):
        out = tmp_path / "sim"
        cfg = {"version": 1, "seed": 5, "output": str(out),
               "simulate": {"n_plots": 30, "n_lidar": 60, "q": 2,
                            "extent": [20.0, 20.0], "grid_spacing": 5.0,
                            "line_spacing": 8.0, "along_spacing": 0.5}}
        cfg_path = tmp_path / "sim.json"
        cfg_path.write_text(json.dumps(cfg))
        result = CliRunner().invoke(main,
                                    ["simulate", "--config", str(cfg_path)])
        assert result.exit_code == 0, result.output
        assert len(io.load_plots(out / "plots.csv")) == 30
        truth = json.loads((out / "truth.json").read_text())
        assert "outcome" in truth and "y_cells" in truth
