from __future__ import annotations

import json

import pytest

from BACKEND import storage
from BACKEND.cli import build_manifest, main, parse_args

LABEL = "linear-0.0-0.0"


@pytest.fixture
def manifest_path(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({
        "root_seed": 3,
        "scenarios": [{"scenario": "linear", "n_treatments": 2, "n_biomarkers": 2}],
        "n_replicates": 1,
        "models": ["dpm"],
        "chain": {"n_iter": 12, "burn_in": 4, "thin": 2, "k_init": 2},
        "trial": {"horizon": 160, "batch_size": 20, "min_group_size": 3},
        "output_dir": str(tmp_path / "out"),
        "jobs": 1,
    }), encoding="utf-8")
    return path


def test_usage_errors_exit_1(capsys):
    assert main(["bogus"]) == 1
    assert main(["simulate", "--scenario", "nope"]) == 1
    assert "error" in capsys.readouterr().err


def test_invalid_manifest_exits_1(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scenarios": [{"scenario": "linear"}], "n_replicates": 0}), encoding="utf-8")
    assert main(["simulate", "--manifest", str(path)]) == 1


def test_flags_override_manifest(manifest_path):
    args = parse_args(["replicate", "--manifest", str(manifest_path), "--seed", "9", "--n-iter", "20",
                       "--literal-alpha"])
    manifest = build_manifest(args)
    assert manifest.root_seed == 9
    assert manifest.chain.n_iter == 20
    assert manifest.chain.burn_in == 4
    assert manifest.literal_alpha
    assert manifest.scenarios[0].n_treatments == 2


def test_flags_without_manifest(monkeypatch, tmp_path):
    monkeypatch.setenv("SURROGATE_JOBS", "3")
    manifest = build_manifest(parse_args(["simulate", "--scenario", "inter", "--c-z", "0.5",
                                          "--output", str(tmp_path)]))
    assert manifest.scenarios[0].label == "inter-0.5-0.0"
    assert manifest.jobs == 3


def test_simulate_is_reproducible(manifest_path, tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--manifest", str(manifest_path), "--output", str(tmp_path / name)]) == 0
    first = tmp_path / "a" / LABEL / "rep_001"
    second = tmp_path / "b" / LABEL / "rep_001"
    for file in ("dataset.csv", "truth.csv"):
        assert (first / file).read_bytes() == (second / file).read_bytes()
    assert len(storage.read_truth(first / "truth.csv")) == 4


def test_report_on_missing_directory_exits_2(tmp_path):
    assert main(["report", str(tmp_path / "missing")]) == 2


def test_evaluate_then_report(manifest_path, tmp_path, capsys):
    assert main(["simulate", "--manifest", str(manifest_path)]) == 0
    rep_dir = tmp_path / "out" / LABEL / "rep_001"
    assert main(["evaluate", str(rep_dir), "--manifest", str(manifest_path), "--model", "simple"]) == 0
    out_dir = rep_dir / "simple"
    for file in ("report.json", "posterior.csv", "groups.csv", "clusters.csv", "density.csv"):
        assert (out_dir / file).exists()
    report = storage.read_report(out_dir / "report.json")
    assert report["second_stage"] == "simple"
    assert 0.0 <= report["p_superiority"] <= 1.0
    assert list(storage.read_table(out_dir / "density.csv").columns) == ["x", "dhat", "dhat0"]

    capsys.readouterr()
    assert main(["report", str(rep_dir)]) == 0
    assert "model: simple" in capsys.readouterr().out


def test_replicate_writes_tables_and_resumes(manifest_path, tmp_path):
    assert main(["replicate", "--manifest", str(manifest_path)]) == 0
    out = tmp_path / "out"
    errors = storage.read_table(out / "table_prediction_error.csv")
    assert sorted(errors["model"]) == ["dpm", "null"]
    assert errors["n"].eq(1).all()
    assert len(storage.read_table(out / "table_superiority.csv")) == 1
    assert storage.read_table(out / "failures.csv").empty

    cell = out / LABEL / "rep_001" / "dpm" / "cell.npz"
    stamp = cell.stat().st_mtime_ns
    assert main(["replicate", "--manifest", str(manifest_path)]) == 0
    assert cell.stat().st_mtime_ns == stamp


def test_long_literal_alpha_flag(manifest_path):
    args = parse_args(["replicate", "--manifest", str(manifest_path), "--paper-literal-alpha"])
    assert build_manifest(args).literal_alpha


def test_scenario_flag_replaces_manifest_grid(manifest_path):
    manifest = build_manifest(parse_args(["simulate", "--manifest", str(manifest_path),
                                          "--scenario", "inter", "--c-u", "0.5"]))
    assert [s.label for s in manifest.scenarios] == ["inter-0.0-0.5"]


def test_shift_flags_apply_to_every_manifest_scenario(manifest_path):
    manifest = build_manifest(parse_args(["simulate", "--manifest", str(manifest_path), "--c-z", "1.0"]))
    assert [s.label for s in manifest.scenarios] == ["linear-1.0-0.0"]
    assert manifest.scenarios[0].n_treatments == 2


def test_negative_scenario_seed_exits_1(tmp_path):
    path = tmp_path / "neg.json"
    path.write_text(json.dumps({"scenarios": [{"scenario": "linear", "seed": -1}],
                                "output_dir": str(tmp_path / "out")}), encoding="utf-8")
    assert main(["simulate", "--manifest", str(path)]) == 1
    assert not (tmp_path / "out").exists()


@pytest.mark.slow
def test_example_writes_walkthrough(tmp_path):
    path = tmp_path / "example.json"
    path.write_text(json.dumps({
        "root_seed": 5,
        "scenarios": [{"scenario": "twotrt"}],
        "chain": {"n_iter": 12, "burn_in": 4, "thin": 2, "k_init": 2},
        "output_dir": str(tmp_path / "out"),
        "jobs": 1,
    }), encoding="utf-8")
    assert main(["example", "--manifest", str(path)]) == 0

    out = tmp_path / "out" / "example"
    for file in ("dataset.csv", "truth.csv", "trace_group_9.csv", "dpm/report.json"):
        assert (out / file).exists()
    trace = storage.read_table(out / "trace_group_9.csv")
    assert list(trace.columns) == ["draw", "label", "correct", "mu_tilde"]
    assert trace["label"].min() >= 1
    report = storage.read_report(out / "dpm" / "report.json")
    assert report["extra"]["held_out_group"] == 9
    assert 0.0 <= report["extra"]["held_out_assignment_rate"] <= 1.0
    assert 0.0 < report["extra"]["censored_fraction"] < 1.0
