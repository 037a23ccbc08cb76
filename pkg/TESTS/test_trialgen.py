from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from BACKEND.api_models import CensorConfig, ScenarioConfig, ScenarioName, TrialConfig
from BACKEND.trialgen import (
    CONTROL,
    InfeasibleDesignError,
    _ArmLedger,
    _close_arms,
    TrialData,
    UnknownScenarioError,
    apply_censoring,
    biomarker_probabilities,
    generate_group_effects,
    manybiom_categories,
    simulate_trial,
    spline,
)


def _effects(name: str, seed: int = 0, **kw):
    cfg = ScenarioConfig(scenario=name, **kw)
    return generate_group_effects(cfg, np.random.default_rng(seed))


def test_null_scenario_outcome_effects_are_constant():
    truth = _effects("null")
    assert len(truth) == 64
    assert all(g.mu == pytest.approx(-1.0) for g in truth)
    assert all(g.true_cluster is None for g in truth)


def test_linear_scenario_formula():
    for g in _effects("linear", seed=3):
        assert g.mu == pytest.approx(-1.0 + g.nu)


def test_nonlinear_scenario_uses_spline():
    for g in _effects("nonlinear", seed=4):
        assert g.mu == pytest.approx(-1.0 + float(spline(np.array(g.nu))))


def test_inter_scenario_masks_effect_by_covariate():
    for g in _effects("inter", seed=5):
        if g.z < 0:
            assert g.mu == pytest.approx(g.nu)
            assert g.true_cluster == 1
        else:
            assert g.mu == pytest.approx(0.0)
            assert g.true_cluster == 2


def test_twotrt_shifts_by_minimum_surrogate_effect():
    truth = _effects("twotrt", seed=6)
    nu_min = min(g.nu for g in truth)
    for g in truth:
        expected = (g.nu - nu_min) if g.k < 2 else 0.0
        assert g.mu == pytest.approx(expected)
        assert g.true_cluster == (1 if g.k < 2 else 2)


def test_manybiom_category_sizes():
    truth = _effects("manybiom", seed=8)
    sizes = np.bincount([g.true_cluster for g in truth])[1:]
    assert tuple(sizes) == (20, 28, 16)
    np.testing.assert_array_equal(np.bincount(manybiom_categories(16))[1:], [5, 7, 4])


def test_group_indexing_is_biomarker_major():
    for g in _effects("simple"):
        assert g.j == g.m * 4 + g.k


def test_generation_is_deterministic():
    assert _effects("nonlinearskew", seed=11) == _effects("nonlinearskew", seed=11)


def test_unknown_scenario():
    with pytest.raises(ValidationError):
        ScenarioConfig(scenario="nonexistent")
    cfg = ScenarioConfig.model_construct(scenario="nonexistent")
    with pytest.raises(UnknownScenarioError):
        generate_group_effects(cfg, np.random.default_rng(0))


def test_biomarker_probabilities_sum_to_one():
    probs = biomarker_probabilities(ScenarioConfig(scenario=ScenarioName.linear))
    assert probs.shape == (16,)
    assert probs.sum() == pytest.approx(1.0)
    assert np.all(probs > 0)


def test_trial_respects_group_size_floor(small_data, small_trial):
    data, _ = small_data
    assert np.all(data.group_sizes() >= small_trial.min_group_size)
    assert np.all(data.control_sizes() >= small_trial.min_group_size)
    assert np.all(data.event)


def test_default_trial_reaches_all_64_groups():
    cfg = ScenarioConfig(scenario=ScenarioName.linear)
    rng = np.random.default_rng(21)
    data = simulate_trial(generate_group_effects(cfg, rng), TrialConfig(), cfg, rng)
    assert data.n_groups == 64
    assert np.all(data.group_sizes() >= TrialConfig().min_group_size)
    assert np.all(data.control_sizes() >= TrialConfig().min_group_size)


def _ledger(treated: list[float], control: list[float]) -> _ArmLedger:
    ledger = _ArmLedger(1, 2)
    for value in control:
        ledger.add(0, 0, value)
    for value in treated:
        ledger.add(0, 1, value)
    return ledger


def test_stopping_waits_for_interim_sample():
    tcfg = TrialConfig(min_interim_n=10)
    rng = np.random.default_rng(5)
    control = list(rng.normal(size=12))
    early = np.ones((1, 1), dtype=bool)
    _close_arms(_ledger(list(rng.normal(size=9) - 4.0), control), early, tcfg)
    assert early.all()
    late = np.ones((1, 1), dtype=bool)
    _close_arms(_ledger(list(rng.normal(size=10) - 4.0), control), late, tcfg)
    assert not late.any()


def test_randomization_weights_are_distributions(small_scenario, small_trial):
    rng = np.random.default_rng(2)
    truth = generate_group_effects(small_scenario, rng)
    log: list[np.ndarray] = []
    simulate_trial(truth, small_trial, small_scenario, rng, weight_log=log)
    assert log
    for weights in log:
        assert np.all(weights >= 0)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)


def test_trial_is_deterministic(small_scenario, small_trial):
    def run():
        rng = np.random.default_rng(99)
        return simulate_trial(generate_group_effects(small_scenario, rng), small_trial, small_scenario, rng)

    a, b = run(), run()
    np.testing.assert_array_equal(a.s, b.s)
    np.testing.assert_array_equal(a.y_obs, b.y_obs)
    np.testing.assert_array_equal(a.treatment, b.treatment)


def test_infeasible_floor_raises(small_scenario):
    rng = np.random.default_rng(0)
    truth = generate_group_effects(small_scenario, rng)
    tcfg = TrialConfig(horizon=10, min_group_size=50, max_extra_enrollment=0)
    with pytest.raises(InfeasibleDesignError):
        simulate_trial(truth, tcfg, small_scenario, rng)


def test_censoring_cannot_bind_below_window(rng):
    data = TrialData(
        s=np.zeros(4), y_obs=np.array([1.0, 2.0, 5.0, 19.0]), event=np.ones(4, dtype=bool),
        treatment=np.array([CONTROL, 0, CONTROL, 0]), biomarker=np.zeros(4, dtype=int),
        n_treatments=1, n_biomarkers=1,
    )
    out = apply_censoring(data, 20.0, 60.0, rng)
    np.testing.assert_array_equal(out.y_obs, data.y_obs)
    assert np.all(out.event)


def test_censoring_never_lengthens_times(small_data, rng):
    data, _ = small_data
    stretched = TrialData(
        s=data.s, y_obs=data.y_obs * 30.0, event=data.event, treatment=data.treatment,
        biomarker=data.biomarker, n_treatments=data.n_treatments, n_biomarkers=data.n_biomarkers,
    )
    out = apply_censoring(stretched, 20.0, 60.0, rng)
    assert np.all(out.y_obs <= stretched.y_obs)
    censored = ~out.event
    assert np.all((out.y_obs[censored] > 20.0) & (out.y_obs[censored] <= 60.0))


def test_censor_config_needs_ordered_window():
    with pytest.raises(ValidationError):
        CensorConfig(lower=60.0, upper=20.0)


def test_mask_outcomes_hides_one_group(small_data):
    data, _ = small_data
    masked = data.mask_outcomes(1)
    in_group = data.group_index() == 1
    assert np.all(np.isnan(masked.y_obs[in_group]))
    np.testing.assert_array_equal(masked.y_obs[~in_group], data.y_obs[~in_group])
    np.testing.assert_array_equal(masked.s, data.s)


def test_records_carry_indicator_vectors(small_data):
    data, _ = small_data
    records = data.records()
    assert all(sum(r.w) <= 1 and sum(r.b) == 1 for r in records)
    rebuilt = TrialData.from_records(records, data.n_treatments, data.n_biomarkers)
    np.testing.assert_array_equal(rebuilt.treatment, data.treatment)


@pytest.mark.slow
def test_censored_fraction_near_ten_percent():
    cfg = ScenarioConfig(scenario=ScenarioName.twotrt)
    tcfg = TrialConfig(censor=CensorConfig())
    fractions = []
    for seed in range(30):
        rng = np.random.default_rng(seed)
        data = simulate_trial(generate_group_effects(cfg, rng), tcfg, cfg, rng)
        fractions.append(1.0 - data.event.mean())
    assert np.mean(fractions) == pytest.approx(0.10, abs=0.04)


@pytest.mark.slow
def test_group_size_summary_matches_calibration_target():
    cfg = ScenarioConfig(scenario=ScenarioName.linear)
    summaries = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        sizes = simulate_trial(generate_group_effects(cfg, rng), TrialConfig(), cfg, rng).group_sizes()
        summaries.append(np.quantile(sizes, [0.0, 0.25, 0.5, 0.75, 1.0]))
    target = np.array([6.0, 10.0, 13.0, 20.0, 115.0])
    np.testing.assert_allclose(np.mean(summaries, axis=0), target, rtol=0.3)
