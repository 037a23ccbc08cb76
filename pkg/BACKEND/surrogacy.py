"""
Surrogate-quality evaluation.

For every group j the model is refit with j's outcomes hidden (its surrogate
values and covariate stay in). The refit's draws of mu_j form the predictive
distribution; comparing them with the all-data draws gives the per-draw error
dhat_j = |mu_tilde_j - mu_j|, and D-hat is the mean of dhat_j over groups.
The same machinery with the surrogate-free second stage gives D-hat-0.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import gaussian_kde

import SETTINGS
from BACKEND.api_models import DpmConfig, SecondStage, Stage1PriorConfig
from BACKEND.dpm import PosteriorDraws, relabel_by_appearance, run_chain
from BACKEND.jobs import run_pool
from BACKEND.trialgen import CONTROL, TrialData

logger = logging.getLogger("surrogate_dpm.surrogacy")

SUMMARY_QUANTILES = {"q025": 0.025, "q25": 0.25, "q75": 0.75, "q975": 0.975}


class MaskingError(ValueError):
    pass


@dataclass(frozen=True)
class LooResult:
    j: int
    loo_mu_draws: np.ndarray
    full_mu_draws: np.ndarray
    dhat_draws: np.ndarray
    assigned_cluster_draws: np.ndarray
    label_draws: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.loo_mu_draws)
        for name in ("full_mu_draws", "dhat_draws", "assigned_cluster_draws"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} draws, expected {n}")
        if np.any(self.dhat_draws < 0):
            raise ValueError("dhat draws must be nonnegative")


@dataclass(frozen=True)
class ModelEvaluation:
    second_stage: SecondStage
    full: PosteriorDraws
    folds: list[LooResult]

    @property
    def dhat(self) -> np.ndarray:
        return compute_dhat(self.folds)


@dataclass
class QualityReport:
    second_stage: str
    dhat_summary: dict
    dhat0_summary: dict | None
    p_superiority: float | None
    per_cluster: dict
    per_covariate: dict
    estimated_partition: list[int]
    groups: list[dict]
    d_summary: dict | None = None
    d0_summary: dict | None = None
    p_true_superiority: float | None = None
    correct_cluster: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def check_maskable(data: TrialData, j: int) -> None:
    if not 0 <= j < data.n_groups:
        raise MaskingError(f"group {j + 1} does not exist")
    m = j // data.n_treatments
    control_y = (data.biomarker == m) & (data.treatment == CONTROL) & data.outcome_observed
    if not control_y.any():
        raise MaskingError(f"masking group {j + 1} leaves biomarker {m + 1} without control outcomes")
    others = (data.group_index() != j) & data.outcome_observed
    if not others.any():
        raise MaskingError(f"masking group {j + 1} leaves no outcome data")


def loo_predict(data: TrialData, z, cfg: DpmConfig, priors: Stage1PriorConfig, j: int,
                rng: np.random.Generator, full: PosteriorDraws, plugin_full_mean: bool = False) -> LooResult:
    """Refit with group j's outcomes hidden and pair its mu_j draws with the all-data draws."""
    check_maskable(data, j)
    draws = run_chain(data.mask_outcomes(j), z, cfg, priors, rng, fold=j)
    loo_mu = draws.mu[:, j]
    n = min(len(loo_mu), full.n_draws)
    loo_mu = loo_mu[:n]
    full_mu = np.full(n, full.mu[:, j].mean()) if plugin_full_mean else full.mu[:n, j]
    return LooResult(
        j=j,
        loo_mu_draws=loo_mu,
        full_mu_draws=full_mu,
        dhat_draws=np.abs(loo_mu - full_mu),
        assigned_cluster_draws=draws.labels[:n, j],
        label_draws=draws.labels[:n],
    )


def _fold_task(task: tuple) -> LooResult:
    data, z, cfg, priors, j, seed, full, plugin = task
    started = time.perf_counter()
    result = loo_predict(data, z, cfg, priors, j, np.random.default_rng(seed), full, plugin)
    logger.debug("fold %d (%s) done in %.1fs", j + 1, cfg.second_stage.value, time.perf_counter() - started)
    return result


def evaluate_model(data: TrialData, z, cfg: DpmConfig, priors: Stage1PriorConfig,
                   seed: np.random.SeedSequence, jobs: int = 1, plugin_full_mean: bool = False,
                   groups: list[int] | None = None) -> ModelEvaluation:
    """All-data chain plus one LOO fold per group (all groups unless `groups` is given)."""
    started = time.perf_counter()
    children = seed.spawn(data.n_groups + 1)
    full = run_chain(data, z, cfg, priors, np.random.default_rng(children[0]))
    folds = range(data.n_groups) if groups is None else groups
    tasks = [(data, z, cfg, priors, j, children[j + 1], full, plugin_full_mean) for j in folds]
    results = run_pool(_fold_task, tasks, jobs)
    logger.info("%s evaluation: %d folds in %.1fs", cfg.second_stage.value, len(results), time.perf_counter() - started)
    return ModelEvaluation(second_stage=cfg.second_stage, full=full, folds=results)


def _stack(results: list[LooResult], attr: str) -> np.ndarray:
    if not results:
        raise ValueError("no LOO results")
    lengths = {len(getattr(r, attr)) for r in results}
    if len(lengths) != 1:
        raise ValueError(f"mismatched draw counts across folds: {sorted(lengths)}")
    return np.stack([getattr(r, attr) for r in sorted(results, key=lambda r: r.j)])


def compute_dhat(results: list[LooResult]) -> np.ndarray:
    return _stack(results, "dhat_draws").mean(axis=0)


def compute_true_d(results: list[LooResult], true_mu) -> np.ndarray:
    """Per-draw mean absolute error of the LOO predictions against the simulation truth."""
    loo = _stack(results, "loo_mu_draws")
    truth = np.asarray(true_mu, dtype=float)[[r.j for r in sorted(results, key=lambda r: r.j)]]
    return np.abs(loo - truth[:, None]).mean(axis=0)


def compute_null_dhat(data: TrialData, z, cfg: DpmConfig, priors: Stage1PriorConfig,
                      seed: np.random.SeedSequence, jobs: int = 1) -> np.ndarray:
    null_cfg = cfg.model_copy(update={"second_stage": SecondStage.null})
    return evaluate_model(data, z, null_cfg, priors, seed, jobs).dhat


def prob_superiority(dhat, dhat0) -> float:
    """P(D-hat < D-hat-0), draws paired by index, ties counted one half."""
    dhat = np.asarray(dhat, dtype=float)
    dhat0 = np.asarray(dhat0, dtype=float)
    if dhat.size == 0 or dhat0.size == 0:
        raise ValueError("both draw vectors must be nonempty")
    n = min(dhat.size, dhat0.size)
    a, b = dhat[:n], dhat0[:n]
    return float(np.mean((a < b) + 0.5 * (a == b)))


def coclustering_matrix(label_draws: np.ndarray) -> np.ndarray:
    label_draws = np.asarray(label_draws)
    return (label_draws[:, :, None] == label_draws[:, None, :]).mean(axis=0)


def dahl_cluster_estimate(label_draws) -> np.ndarray:
    """The sampled partition closest in squared error to the co-clustering matrix."""
    label_draws = np.asarray(label_draws)
    if label_draws.ndim != 2 or label_draws.shape[0] == 0:
        raise ValueError("label draws must be a nonempty (iterations, groups) matrix")
    probs = coclustering_matrix(label_draws)
    scores = np.array([(((draw[:, None] == draw[None, :]) - probs) ** 2).sum() for draw in label_draws])
    return relabel_by_appearance(label_draws[int(np.argmin(scores))])


def held_out_hits(label_draws, assigned, true_clusters, j: int) -> np.ndarray | None:
    """
    Per draw, whether group j joined its true cluster: its label equals the modal
    label of its true-cluster peers and differs from the modal label of every
    other true cluster. None when j has no true cluster or no peers.
    """
    true_clusters = np.asarray([np.nan if c is None else c for c in true_clusters], dtype=float)
    if np.isnan(true_clusters[j]):
        return None
    members = {c: np.flatnonzero(true_clusters == c) for c in np.unique(true_clusters[~np.isnan(true_clusters)])}
    peers = members.pop(true_clusters[j])
    peers = peers[peers != j]
    if peers.size == 0:
        return None
    label_draws = np.asarray(label_draws)
    assigned = np.asarray(assigned)
    hits = assigned == np.array([np.bincount(row[peers]).argmax() for row in label_draws])
    for others in members.values():
        hits &= assigned != np.array([np.bincount(row[others]).argmax() for row in label_draws])
    return hits


def correct_cluster_proportion(results: list[LooResult], true_clusters) -> float:
    """Mean over folds of the held-out group's hit rate (see held_out_hits)."""
    rates = []
    for r in results:
        hits = held_out_hits(r.label_draws, r.assigned_cluster_draws, true_clusters, r.j)
        if hits is not None:
            rates.append(hits.mean())
    return float(np.mean(rates)) if rates else float("nan")


def summarize(draws) -> dict:
    draws = np.asarray(draws, dtype=float)
    out = {"mean": float(draws.mean()), "median": float(np.median(draws)), "sd": float(draws.std(ddof=0))}
    for key, q in SUMMARY_QUANTILES.items():
        out[key] = float(np.quantile(draws, q))
    return out


def _subset_dhat(results: list[LooResult], members) -> np.ndarray:
    members = set(int(j) for j in members)
    return compute_dhat([r for r in results if r.j in members])


def _strata(n_groups: int, n_treatments: int, z: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
    j = np.arange(n_groups)
    strata = {
        "treatment": {str(k + 1): j[j % n_treatments == k] for k in range(n_treatments)},
        "biomarker": {str(m + 1): j[j // n_treatments == m] for m in range(n_groups // n_treatments)},
    }
    z1 = np.asarray(z, dtype=float).reshape(n_groups, -1)[:, 0]
    cuts = np.quantile(z1, [1.0 / 3.0, 2.0 / 3.0])
    tercile = np.digitize(z1, cuts)
    strata["z_tercile"] = {name: j[tercile == t] for t, name in enumerate(("low", "mid", "high"))}
    return strata


def subgroup_summaries(results: list[LooResult], labels, n_treatments: int, z, second_stage: str,
                       null_results: list[LooResult] | None = None, true_mu=None, true_clusters=None) -> QualityReport:
    """
    Overall, per-cluster and per-stratum D-hat summaries.

    `labels` is the estimated partition over all groups; a cluster is flagged
    when its median D-hat falls outside the overall interquartile range.
    """
    labels = np.asarray(labels, dtype=int)
    n_groups = len(labels)
    dhat = compute_dhat(results)
    dhat0 = compute_dhat(null_results) if null_results else None
    overall = summarize(dhat)

    per_cluster = {}
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        sub = _subset_dhat(results, members)
        entry = {
            "groups": [int(j) + 1 for j in members],
            "dhat": summarize(sub),
            "flagged": bool(not overall["q25"] <= float(np.median(sub)) <= overall["q75"]),
        }
        if null_results:
            entry["p_superiority"] = prob_superiority(sub, _subset_dhat(null_results, members))
        per_cluster[str(int(c) + 1)] = entry

    per_covariate = {}
    for name, levels in _strata(n_groups, n_treatments, z).items():
        per_covariate[name] = {}
        for level, members in levels.items():
            if members.size == 0:
                continue
            sub = _subset_dhat(results, members)
            entry = {"dhat": summarize(sub)}
            if null_results:
                entry["p_superiority"] = prob_superiority(sub, _subset_dhat(null_results, members))
            per_covariate[name][level] = entry

    by_j = {r.j: r for r in results}
    groups = []
    for j in range(n_groups):
        row = {"j": j + 1, "cluster": int(labels[j]) + 1}
        if j in by_j:
            half_width = per_cluster[str(int(labels[j]) + 1)]["dhat"]["median"]
            centre = float(np.median(by_j[j].loo_mu_draws))
            row.update(median_mu=centre, lower=centre - half_width, upper=centre + half_width)
        groups.append(row)

    report = QualityReport(
        second_stage=second_stage,
        dhat_summary=overall,
        dhat0_summary=None if dhat0 is None else summarize(dhat0),
        p_superiority=None if dhat0 is None else prob_superiority(dhat, dhat0),
        per_cluster=per_cluster,
        per_covariate=per_covariate,
        estimated_partition=[int(c) + 1 for c in labels],
        groups=groups,
    )
    if true_mu is not None:
        d = compute_true_d(results, true_mu)
        report.d_summary = summarize(d)
        if null_results:
            d0 = compute_true_d(null_results, true_mu)
            report.d0_summary = summarize(d0)
            report.p_true_superiority = prob_superiority(d, d0)
    if true_clusters is not None and any(c is not None for c in true_clusters):
        report.correct_cluster = correct_cluster_proportion(results, true_clusters)
    return report


def density_grid(dhat, dhat0=None, n_points: int = SETTINGS.DENSITY_GRID_POINTS) -> dict[str, np.ndarray]:
    """Kernel density estimates of D-hat (and D-hat-0) on a shared grid starting at 0."""
    series = {"dhat": np.asarray(dhat, dtype=float)}
    if dhat0 is not None:
        series["dhat0"] = np.asarray(dhat0, dtype=float)
    top = max(float(s.max()) for s in series.values())
    grid = np.linspace(0.0, 1.1 * top if top > 0 else 1.0, n_points)
    out = {"x": grid}
    step = grid[1] - grid[0]
    for name, values in series.items():
        if np.ptp(values) > 0:
            out[name] = gaussian_kde(values)(grid)
        else:
            # Point mass: all weight on the nearest grid cell.
            density = np.zeros(n_points)
            density[int(np.argmin(np.abs(grid - values[0])))] = 1.0 / step
            out[name] = density
    return out
