from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from BACKEND.api_models import ChainConfig, DpmConfig, ScenarioConfig, ScenarioName, TrialConfig  # noqa: E402
from BACKEND.trialgen import CONTROL, TrialData, generate_group_effects, simulate_trial  # noqa: E402


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def small_scenario() -> ScenarioConfig:
    return ScenarioConfig(scenario=ScenarioName.linear, n_treatments=2, n_biomarkers=2)


@pytest.fixture
def small_trial() -> TrialConfig:
    return TrialConfig(horizon=160, batch_size=20, min_group_size=3)


@pytest.fixture
def small_data(small_scenario, small_trial):
    rng = np.random.default_rng(7)
    truth = generate_group_effects(small_scenario, rng)
    return simulate_trial(truth, small_trial, small_scenario, rng), truth


@pytest.fixture
def short_chain() -> ChainConfig:
    return ChainConfig(n_iter=30, burn_in=10, thin=2, k_init=2)


@pytest.fixture
def short_dpm(short_chain) -> DpmConfig:
    return DpmConfig(chain=short_chain)


def make_data(cells: dict[tuple[int, int], list[tuple[float, float]]], n_treatments: int,
              n_biomarkers: int, events=None) -> TrialData:
    """Toy data from {(m, k): [(s, y), ...]}; k = -1 is control."""
    s, y, treatment, biomarker = [], [], [], []
    for (m, k), rows in cells.items():
        for s_i, y_i in rows:
            s.append(s_i)
            y.append(y_i)
            treatment.append(k)
            biomarker.append(m)
    n = len(s)
    return TrialData(
        s=np.array(s, dtype=float),
        y_obs=np.array(y, dtype=float),
        event=np.ones(n, dtype=bool) if events is None else np.asarray(events, dtype=bool),
        treatment=np.array(treatment, dtype=int),
        biomarker=np.array(biomarker, dtype=int),
        n_treatments=n_treatments,
        n_biomarkers=n_biomarkers,
    )


__all__ = ["CONTROL", "make_data"]
