from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from BACKEND import storage
from BACKEND.api_models import SecondStage
from BACKEND.dpm import PosteriorDraws
from BACKEND.trialgen import GroupTruth


def test_dataset_round_trip(small_data, tmp_path):
    data, _ = small_data
    masked = data.mask_outcomes(1)
    path = storage.write_dataset(masked, tmp_path / "rep" / "dataset.csv")
    back = storage.read_dataset(path)
    assert (back.n_treatments, back.n_biomarkers) == (data.n_treatments, data.n_biomarkers)
    np.testing.assert_array_equal(back.treatment, masked.treatment)
    np.testing.assert_array_equal(back.biomarker, masked.biomarker)
    np.testing.assert_array_equal(back.event, masked.event)
    np.testing.assert_array_equal(back.s, masked.s)
    np.testing.assert_array_equal(back.y_obs, masked.y_obs)


def test_dataset_columns(small_data, tmp_path):
    data, _ = small_data
    frame = pd.read_csv(storage.write_dataset(data, tmp_path / "dataset.csv"))
    assert list(frame.columns) == ["s", "y_obs", "event", "w_1", "w_2", "b_1", "b_2"]


def test_bad_indicators_rejected(tmp_path):
    path = tmp_path / "dataset.csv"
    pd.DataFrame({"s": [1.0], "y_obs": [2.0], "event": [1], "w_1": [1], "b_1": [1], "b_2": [1]}).to_csv(
        path, index=False)
    with pytest.raises(ValueError):
        storage.read_dataset(path)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(OSError, match="nowhere.csv"):
        storage.read_dataset(tmp_path / "nowhere.csv")


def test_truth_round_trip(tmp_path):
    truth = [
        GroupTruth(j=0, m=0, k=0, nu=0.5, mu=-1.0, z=0.1, u=0.0, true_cluster=1),
        GroupTruth(j=1, m=0, k=1, nu=-0.25, mu=0.0, z=-2.0, u=0.3, true_cluster=None),
    ]
    path = storage.write_truth(truth, tmp_path / "truth.csv")
    assert pd.read_csv(path)["j"].tolist() == [1, 2]
    assert storage.read_truth(path) == truth


def test_posterior_long_form(tmp_path):
    t, g = 3, 4
    draws = PosteriorDraws(
        nu=np.zeros((t, g)), mu=np.ones((t, g)), eta=np.zeros((t, 2)), xi=np.zeros((t, 2)),
        sigma_s=np.ones(t), sigma_y=np.ones(t), labels=np.zeros((t, g), dtype=int),
        alpha=np.full(t, 0.5), n_clusters=np.ones(t, dtype=int), cluster_params=(),
        iterations=np.array([10, 12, 14]), second_stage=SecondStage.dpm,
    )
    frame = storage.posterior_frame(draws)
    assert len(frame) == t * (3 * g + 2 * 2) + 4 * t
    labels = frame[frame["parameter"] == "label"]
    assert labels["value"].eq(1.0).all()
    assert frame.loc[frame["parameter"] == "alpha", "index"].eq(0).all()

    storage.write_posterior(draws, tmp_path / "posterior.csv")
    back = pd.read_csv(tmp_path / "posterior.csv")
    assert list(back.columns) == ["iteration", "parameter", "index", "value"]
    assert sorted(back["iteration"].unique()) == [10, 12, 14]


def test_report_keys_sorted(tmp_path):
    path = storage.write_report({"b": 1, "a": {"z": 2, "y": float("nan")}}, tmp_path / "report.json")
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert np.isnan(storage.read_report(path)["a"]["y"])


def test_cell_marker(tmp_path):
    cell = tmp_path / "rep_001" / "dpm" / "cell.npz"
    assert not storage.is_done(cell.parent)
    storage.save_cell(cell, dhat=np.array([0.1, 0.2]), correct_cluster=np.array(0.75))
    assert storage.is_done(cell.parent)
    loaded = storage.load_cell(cell)
    np.testing.assert_array_equal(loaded["dhat"], [0.1, 0.2])
    assert float(loaded["correct_cluster"]) == pytest.approx(0.75)


def test_floats_come_back_bit_exact(tmp_path):
    values = np.random.default_rng(8).normal(size=500) * np.logspace(-6, 6, 500)
    storage.write_table(pd.DataFrame({"value": values}), tmp_path / "values.csv")
    back = storage.read_table(tmp_path / "values.csv")["value"].to_numpy()
    assert np.array_equal(back, values)


def test_table_keeps_null_model_name(tmp_path):
    frame = pd.DataFrame({"model": ["dpm", "null", "simple"], "p": [0.5, float("nan"), 0.25]})
    storage.write_table(frame, tmp_path / "table.csv")
    back = storage.read_table(tmp_path / "table.csv")
    assert back["model"].tolist() == ["dpm", "null", "simple"]
    assert np.isnan(back["p"][1])
