"""Experiment specs, artifact layout, determinism, sweeps, and the CLI."""

import json

import numpy as np
import pytest

from otfilter import SpecError, load_experiment_spec, report, run_experiment, sweep
from otfilter.cli import main as cli_main
from otfilter.harness import (
    METRICS_HEADER,
    SWEEP_HEADER,
    ExperimentSpec,
    validate_spec_dict,
)
from otfilter import harness as harness_mod


def base_spec(**overrides):
    raw = {
        "model": "dynamic_linear",
        "methods": ["enkf", "sir"],
        "particles": 48,
        "steps": 2,
        "seeds": [1, 2],
        "reference": "sir:400",
        "out_dir": "out",
    }
    raw.update(overrides)
    return raw


class TestSpecValidation:
    def test_minimal_spec_fills_defaults(self):
        spec = validate_spec_dict({"model": "dynamic_linear", "methods": ["enkf"],
                                   "particles": 8, "steps": 3, "seeds": [7],
                                   "out_dir": "x"})
        assert spec.experiment == "dynamic_linear"
        assert spec.reference == "sir_1e5"
        assert spec.metrics == ("mse", "ess", "mmd2")
        assert spec.model_params == {}

    def test_static_default_reference_is_grid(self):
        spec = validate_spec_dict({"model": "static_square", "methods": ["enkf"],
                                   "particles": 8, "steps": 1, "seeds": [1],
                                   "out_dir": "x"})
        assert spec.reference == "grid"

    def test_lorenz_default_reference_is_none(self):
        spec = validate_spec_dict({"model": "lorenz63", "methods": ["enkf"],
                                   "particles": 8, "steps": 2, "seeds": [1],
                                   "out_dir": "x"})
        assert spec.reference == "none"
        assert spec.metrics == ("mse", "ess")

    def test_out_dir_falls_back_to_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("OTFILTER_OUT", str(tmp_path / "envout"))
        spec = validate_spec_dict({"model": "dynamic_linear", "methods": ["enkf"],
                                   "particles": 8, "steps": 1, "seeds": [1]})
        assert spec.out_dir == str(tmp_path / "envout")

    def test_round_trips_through_to_dict(self):
        spec = validate_spec_dict(base_spec(metrics=["mse", "mmd2"]))
        assert validate_spec_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("mutation,path_fragment", [
        ({"bogus": 1}, "bogus"),
        ({"schema_version": 99}, "schema_version"),
        ({"model": "warp_drive"}, "model.id"),
        ({"model": {"id": "dynamic_linear", "params": {"nope": 1}}}, "model.params.nope"),
        ({"model": {"id": "dynamic_linear", "junk": 1}}, "model.junk"),
        ({"model": 7}, "model"),
        ({"methods": ["ukf"]}, "methods[0].name"),
        ({"methods": [{"name": "enkf", "config": {"nope": 1}}]}, "methods[0].config.nope"),
        ({"methods": ["enkf", "enkf"]}, "methods"),
        ({"methods": "enkf"}, "methods"),
        ({"particles": 1}, "particles"),
        ({"steps": 0}, "steps"),
        ({"seeds": []}, "seeds"),
        ({"seeds": [1, 1]}, "seeds"),
        ({"seeds": [1.5]}, "seeds[0]"),
        ({"metrics": ["speed"]}, "metrics[0]"),
        ({"metrics": ["wall_seconds"]}, "metrics"),
        ({"reference": "sir:1"}, "reference"),
        ({"reference": "sir:many"}, "reference"),
        ({"reference": "oracle"}, "reference"),
        ({"reference": "none", "metrics": ["mmd2"]}, "metrics"),
        ({"reference": "grid"}, "reference"),
        ({"out_dir": ""}, "out_dir"),
    ])
    def test_rejections_name_the_path(self, mutation, path_fragment):
        raw = base_spec()
        raw.update(mutation)
        with pytest.raises(SpecError, match=path_fragment.replace("[", "\\[")):
            validate_spec_dict(raw)

    def test_grid_reference_needs_single_step_static(self):
        raw = base_spec(model="static_square", reference="grid", steps=1)
        assert validate_spec_dict(raw).reference == "grid"
        with pytest.raises(SpecError, match="reference"):
            validate_spec_dict(base_spec(model="static_square", reference="grid", steps=2))

    def test_kalman_reference_needs_linear_model(self):
        raw = base_spec(model="dynamic_linear", reference="kalman")
        assert validate_spec_dict(raw).reference == "kalman"
        with pytest.raises(SpecError, match="reference"):
            validate_spec_dict(base_spec(model="dynamic_bimodal", reference="kalman"))

    def test_constructor_failures_become_spec_errors(self):
        raw = base_spec(model={"id": "dynamic_linear", "params": {"alpha": 2.0}})
        with pytest.raises(SpecError, match="constructing"):
            validate_spec_dict(raw)

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(base_spec()), encoding="utf-8")
        assert load_experiment_spec(path).model_id == "dynamic_linear"
        with pytest.raises(SpecError, match="no such config"):
            load_experiment_spec(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        with pytest.raises(SpecError, match="not valid JSON"):
            load_experiment_spec(bad)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    spec = validate_spec_dict(base_spec(out_dir=str(out)))
    manifest = run_experiment(spec)
    return spec, manifest, out


class TestRunExperiment:
    def test_artifact_files_exist(self, small_run):
        _, manifest, out = small_run
        names = {f["name"] for f in manifest["files"]}
        assert {"metrics.csv", "truth.csv", "particles.csv"} <= names
        assert "traces.csv" not in names
        for name in names:
            assert (out / name).is_file()
        assert (out / "manifest.json").is_file()

    def test_metrics_csv_contract(self, small_run):
        spec, _, out = small_run
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) > 1
        for line in lines[1:]:
            t, method, metric, value, run_id = line.split(",")
            assert method in ("enkf", "sir")
            assert metric in spec.metrics
            assert 1 <= int(t) <= spec.steps
            assert int(run_id) in spec.seeds
            assert np.isfinite(float(value))

    def test_expected_row_count(self, small_run):
        spec, _, out = small_run
        lines = (out / "metrics.csv").read_text().splitlines()[1:]
        # mse, ess and mmd2 each contribute one row per (method, seed, step)
        assert len(lines) == len(spec.methods) * len(spec.seeds) * spec.steps * 3

    def test_manifest_records_runs_and_checksums(self, small_run):
        spec, manifest, _ = small_run
        assert manifest["errors"] == []
        assert len(manifest["runs"]) == len(spec.methods) * len(spec.seeds)
        for rec in manifest["runs"]:
            assert rec["wall_seconds"] > 0.0
            assert rec["conditioning_seconds"] >= 0.0
        assert set(manifest["truth_checksums"]) == {"1", "2"}
        assert manifest["mmd_bandwidth"] > 0.0

    def test_rerun_is_byte_identical(self, small_run, tmp_path):
        spec, manifest, out = small_run
        again = run_experiment(spec, out_dir=str(tmp_path))
        for name in ("metrics.csv", "truth.csv", "particles.csv"):
            assert (out / name).read_bytes() == (tmp_path / name).read_bytes()
        assert again["truth_checksums"] == manifest["truth_checksums"]
        assert again["mmd_bandwidth"] == manifest["mmd_bandwidth"]

    def test_report_renders_markdown(self, small_run):
        _, _, out = small_run
        text = report(out / "manifest.json")
        assert text.startswith("# dynamic_linear")
        assert "| method |" in text
        assert "| enkf |" in text and "| sir |" in text
        assert (out / "report.md").read_text() == text

    def test_cell_failure_is_isolated(self, tmp_path):
        raw = base_spec(
            methods=["enkf", {"name": "otpf", "config": {
                "width": 8, "blocks": 1, "lr_f": 1e150, "lr_map": 1e150,
                "outer_init": 4, "outer_floor": 1, "batch_size": 16}}],
            seeds=[1], out_dir=str(tmp_path))
        with np.errstate(over="ignore", invalid="ignore"):
            manifest = run_experiment(validate_spec_dict(raw))
        assert [e["method"] for e in manifest["errors"]] == ["otpf"]
        assert "diverged" in manifest["errors"][0]["error"]
        assert [r["method"] for r in manifest["runs"]] == ["enkf"]
        lines = (tmp_path / "metrics.csv").read_text().splitlines()[1:]
        assert all(line.split(",")[1] == "enkf" for line in lines)

    def test_traces_csv_written_for_transport_runs(self, tmp_path):
        raw = base_spec(
            methods=[{"name": "otpf", "config": {
                "width": 8, "blocks": 1, "outer_init": 2, "outer_floor": 1,
                "batch_size": 16}}],
            seeds=[1], out_dir=str(tmp_path))
        run_experiment(validate_spec_dict(raw))
        lines = (tmp_path / "traces.csv").read_text().splitlines()
        assert lines[0] == "run_id,method,step_index,outer_iter,objective,map_loss,potential_term"
        # outer_init=2 then halved to the floor of 1: 3 outer rows in total
        assert len(lines) == 1 + 3
        first = lines[1].split(",")
        assert first[:4] == ["1", "otpf", "1", "0"]
        for line in lines[1:]:
            parts = line.split(",")
            assert len(parts) == 7
            assert all(np.isfinite(float(v)) for v in parts[4:])

    def test_particles_csv_respects_size_limit(self, tmp_path, monkeypatch):
        monkeypatch.setattr(harness_mod, "PARTICLES_VALUE_LIMIT", 10)
        raw = base_spec(seeds=[1], out_dir=str(tmp_path))
        manifest = run_experiment(validate_spec_dict(raw))
        assert not (tmp_path / "particles.csv").exists()
        assert "particles.csv" not in {f["name"] for f in manifest["files"]}

    def test_report_rejects_sweep_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"spec": {}, "cells": []}), encoding="utf-8")
        with pytest.raises(ValueError, match="run_experiment manifest"):
            report(path)


class TestSweep:
    def test_particle_axis_aggregates(self, tmp_path):
        raw = base_spec(methods=["enkf"], steps=1, seeds=[1, 2],
                        reference="none", metrics=["mse"], out_dir=str(tmp_path))
        spec = validate_spec_dict(raw)
        manifest = sweep(spec, "particles", [16, 32])
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == SWEEP_HEADER
        rows = [line.split(",") for line in lines[1:]]
        assert [(r[0], r[1], r[2], r[3]) for r in rows] == [
            ("particles", "16", "enkf", "mse"), ("particles", "32", "enkf", "mse")]
        for r in rows:
            assert float(r[4]) >= 0.0 and float(r[5]) >= 0.0 and float(r[6]) > 0.0
        assert [c["value"] for c in manifest["cells"]] == [16, 32]
        for value in (16, 32):
            assert (tmp_path / f"particles_{value}" / "metrics.csv").is_file()

    def test_train_budget_axis_overrides_otpf(self, tmp_path):
        raw = base_spec(
            methods=[{"name": "otpf", "config": {"width": 8, "blocks": 1,
                                                 "outer_init": 4, "outer_floor": 1,
                                                 "batch_size": 8}}],
            particles=16, steps=1, seeds=[1], reference="none", metrics=["mse"],
            out_dir=str(tmp_path))
        spec = validate_spec_dict(raw)
        sweep(spec, "train_budget", [1, 2])
        for value in (1, 2):
            cell = json.loads((tmp_path / f"train_budget_{value}" / "manifest.json")
                              .read_text())
            assert cell["spec"]["methods"][0]["config"]["outer_init"] == value

    def test_axis_validation(self, tmp_path):
        spec = validate_spec_dict(base_spec(out_dir=str(tmp_path)))
        with pytest.raises(SpecError, match="axis"):
            sweep(spec, "temperature", [1])
        with pytest.raises(SpecError, match="values"):
            sweep(spec, "particles", [])
        with pytest.raises(SpecError, match="train_budget"):
            sweep(spec, "train_budget", [1])
        lorenz = validate_spec_dict(base_spec(model="lorenz63", reference="none",
                                              metrics=["mse"], out_dir=str(tmp_path)))
        with pytest.raises(SpecError, match="dimension"):
            sweep(lorenz, "dimension", [3])


class TestCli:
    def write_spec(self, tmp_path, **overrides):
        raw = base_spec(methods=["enkf"], steps=1, seeds=[1], reference="none",
                        metrics=["mse"], particles=16,
                        out_dir=str(tmp_path / "out"))
        raw.update(overrides)
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(raw), encoding="utf-8")
        return path

    def test_run_success(self, tmp_path, capsys):
        path = self.write_spec(tmp_path)
        assert cli_main(["run", "--config", str(path)]) == 0
        assert "manifest.json" in capsys.readouterr().out
        assert (tmp_path / "out" / "metrics.csv").is_file()

    def test_run_seed_override(self, tmp_path):
        path = self.write_spec(tmp_path)
        assert cli_main(["run", "--config", str(path), "--seed", "5"]) == 0
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["spec"]["seeds"] == [5]

    def test_run_invalid_spec_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": "warp_drive"}), encoding="utf-8")
        assert cli_main(["run", "--config", str(bad)]) == 2
        assert "invalid spec" in capsys.readouterr().err

    def test_run_missing_file_exits_2(self, tmp_path):
        assert cli_main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_run_cell_failure_exits_1(self, tmp_path, capsys):
        path = self.write_spec(
            tmp_path,
            methods=[{"name": "otpf", "config": {
                "width": 8, "blocks": 1, "lr_f": 1e150, "lr_map": 1e150,
                "outer_init": 4, "outer_floor": 1, "batch_size": 8}}])
        with np.errstate(over="ignore", invalid="ignore"):
            assert cli_main(["run", "--config", str(path)]) == 1
        assert "cell failed" in capsys.readouterr().err

    def test_sweep_and_report_commands(self, tmp_path, capsys):
        path = self.write_spec(tmp_path)
        assert cli_main(["sweep", "--config", str(path), "--axis", "particles",
                         "--values", "8,16"]) == 0
        assert (tmp_path / "out" / "sweep.csv").is_file()
        capsys.readouterr()
        assert cli_main(["run", "--config", str(path), "--out",
                         str(tmp_path / "run2")]) == 0
        capsys.readouterr()
        assert cli_main(["report", "--manifest",
                         str(tmp_path / "run2" / "manifest.json")]) == 0
        assert "| method |" in capsys.readouterr().out

    def test_sweep_bad_values_exits_2(self, tmp_path, capsys):
        path = self.write_spec(tmp_path)
        assert cli_main(["sweep", "--config", str(path), "--axis", "particles",
                         "--values", "a,b"]) == 2
        assert "comma-separated" in capsys.readouterr().err
