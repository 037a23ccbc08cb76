"""
Simulated platform trials.

Group-level truths come from one of the scenario generators; subject-level
data come from an adaptive platform trial with batch-updated randomization
within biomarker signatures, t-test stopping rules, a group-size floor and
optional uniform right censoring.

Indexing: group j = m * K + k (0-based, treatments vary fastest). Treatment
arm -1 denotes the shared control within a biomarker signature.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import ndtr

import SETTINGS
from BACKEND.api_models import ScenarioConfig, ScenarioName, TrialConfig
from BACKEND.distributions import skewnorm_sample

logger = logging.getLogger("surrogate_dpm.trialgen")

CONTROL = -1
# Linear spline for the nonlinear scenario: slope on nu, then increments at the knots.
SPLINE_KNOTS = (-1.0, 0.0, 1.0)
SPLINE_COEFS = (0.2, 1.2, -1.0, 1.1)
CLUSTERED_SCENARIOS = frozenset(
    {ScenarioName.inter, ScenarioName.interhide, ScenarioName.onetrt, ScenarioName.twotrt, ScenarioName.manybiom}
)


class UnknownScenarioError(ValueError):
    pass


class InfeasibleDesignError(RuntimeError):
    pass


@dataclass(frozen=True)
class GroupTruth:
    j: int
    m: int
    k: int
    nu: float
    mu: float
    z: float
    u: float
    true_cluster: int | None = None


@dataclass(frozen=True)
class SubjectRecord:
    s: float
    y_obs: float
    event: bool
    w: tuple[int, ...]
    b: tuple[int, ...]


@dataclass(frozen=True)
class TrialData:
    """Columnar subject records. A NaN y_obs marks an outcome hidden from the model."""

    s: np.ndarray
    y_obs: np.ndarray
    event: np.ndarray
    treatment: np.ndarray
    biomarker: np.ndarray
    n_treatments: int
    n_biomarkers: int

    def __post_init__(self) -> None:
        n = len(self.s)
        for name in ("y_obs", "event", "treatment", "biomarker"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        observed = self.y_obs[np.isfinite(self.y_obs)]
        if np.any(observed <= 0):
            raise ValueError("observed times must be positive")

    @property
    def n_subjects(self) -> int:
        return int(len(self.s))

    @property
    def n_groups(self) -> int:
        return self.n_treatments * self.n_biomarkers

    @property
    def log_y(self) -> np.ndarray:
        return np.log(self.y_obs)

    @property
    def outcome_observed(self) -> np.ndarray:
        return np.isfinite(self.y_obs)

    def group_index(self) -> np.ndarray:
        return np.where(self.treatment == CONTROL, -1, self.biomarker * self.n_treatments + self.treatment)

    def group_sizes(self) -> np.ndarray:
        g = self.group_index()
        return np.bincount(g[g >= 0], minlength=self.n_groups)

    def control_sizes(self) -> np.ndarray:
        return np.bincount(self.biomarker[self.treatment == CONTROL], minlength=self.n_biomarkers)

    def mask_outcomes(self, j: int) -> "TrialData":
        if not 0 <= j < self.n_groups:
            raise IndexError(f"group {j} out of range")
        y_obs = np.where(self.group_index() == j, np.nan, self.y_obs)
        event = np.where(self.group_index() == j, False, self.event)
        return replace(self, y_obs=y_obs, event=event)

    def records(self) -> list[SubjectRecord]:
        out = []
        for i in range(self.n_subjects):
            w = [0] * self.n_treatments
            if self.treatment[i] != CONTROL:
                w[self.treatment[i]] = 1
            b = [0] * self.n_biomarkers
            b[self.biomarker[i]] = 1
            out.append(SubjectRecord(float(self.s[i]), float(self.y_obs[i]), bool(self.event[i]), tuple(w), tuple(b)))
        return out

    @classmethod
    def from_records(cls, records: list[SubjectRecord], n_treatments: int, n_biomarkers: int) -> "TrialData":
        treatment = []
        biomarker = []
        for rec in records:
            if sum(rec.w) > 1 or sum(rec.b) != 1:
                raise ValueError(f"invalid indicator vectors in record {rec}")
            treatment.append(rec.w.index(1) if 1 in rec.w else CONTROL)
            biomarker.append(rec.b.index(1))
        return cls(
            s=np.array([r.s for r in records], dtype=float),
            y_obs=np.array([r.y_obs for r in records], dtype=float),
            event=np.array([r.event for r in records], dtype=bool),
            treatment=np.array(treatment, dtype=int),
            biomarker=np.array(biomarker, dtype=int),
            n_treatments=n_treatments,
            n_biomarkers=n_biomarkers,
        )


def spline(nu: np.ndarray) -> np.ndarray:
    out = SPLINE_COEFS[0] * nu
    for knot, coef in zip(SPLINE_KNOTS, SPLINE_COEFS[1:]):
        out = out + coef * np.maximum(nu - knot, 0.0)
    return out


def manybiom_categories(n_biomarkers: int) -> np.ndarray:
    """Category 1..3 per biomarker, consecutive blocks in the 5:7:4 proportion."""
    shares = np.asarray(SETTINGS.MANYBIOM_SHARES, dtype=float)
    raw = n_biomarkers * shares / shares.sum()
    counts = np.floor(raw).astype(int)
    for idx in np.argsort(raw - counts)[::-1][: n_biomarkers - counts.sum()]:
        counts[idx] += 1
    return np.repeat(np.arange(1, len(counts) + 1), counts)


def generate_group_effects(cfg: ScenarioConfig, rng: np.random.Generator) -> list[GroupTruth]:
    try:
        scenario = ScenarioName(cfg.scenario)
    except ValueError as exc:
        raise UnknownScenarioError(f"unknown scenario '{cfg.scenario}'") from exc

    K, M = cfg.n_treatments, cfg.n_biomarkers
    n = K * M
    m_idx = np.repeat(np.arange(M), K)
    k_idx = np.tile(np.arange(K), M)
    cz, cu = cfg.c_z, cfg.c_u

    if scenario is ScenarioName.nonlinearskew:
        nu = skewnorm_sample(cfg.skew_shape, rng, n)
        z = skewnorm_sample(cfg.skew_shape, rng, n)
    else:
        nu = rng.standard_normal(n)
        z = rng.standard_normal(n)
    u = rng.standard_normal(n)
    cluster = None

    if scenario in (ScenarioName.nonlinear, ScenarioName.nonlinearskew):
        mu = -1.0 + spline(nu) + cz * np.abs(z) + cu * u
    elif scenario is ScenarioName.linear:
        mu = -1.0 + nu + cz * np.abs(z) + cu * u
    elif scenario is ScenarioName.simple:
        mu = -1.0 + nu + cz * z + cu * u
    elif scenario is ScenarioName.null:
        mu = -1.0 + cz * np.abs(z) + cu * u
    elif scenario is ScenarioName.inter:
        mu = (z < 0) * nu + cu * u
        cluster = np.where(z < 0, 1, 2)
    elif scenario is ScenarioName.interhide:
        mu = (u < 0) * nu + cz * z
        cluster = np.where(u < 0, 1, 2)
    elif scenario is ScenarioName.onetrt:
        active = k_idx == 0
        mu = active * nu + cz * z + cu * u
        cluster = np.where(active, 1, 2)
    elif scenario is ScenarioName.twotrt:
        z = z + np.linspace(-SETTINGS.TWOTRT_Z_SPREAD, SETTINGS.TWOTRT_Z_SPREAD, K)[k_idx]
        active = k_idx < 2
        mu = active * (nu - nu.min()) + cz * z + cu * u
        cluster = np.where(active, 1, 2)
    elif scenario is ScenarioName.manybiom:
        category = manybiom_categories(M)[m_idx]
        z = (category - 1) + 0.5 * z
        mu = 0.25 * (category - 3) * (nu - nu.min()) + cz * z + cu * u
        cluster = category
    else:
        raise UnknownScenarioError(f"unknown scenario '{cfg.scenario}'")

    return [
        GroupTruth(
            j=j, m=int(m_idx[j]), k=int(k_idx[j]),
            nu=float(nu[j]), mu=float(mu[j]), z=float(z[j]), u=float(u[j]),
            true_cluster=None if cluster is None else int(cluster[j]),
        )
        for j in range(n)
    ]


def biomarker_probabilities(cfg: ScenarioConfig) -> np.ndarray:
    M = cfg.n_biomarkers
    prevalences = cfg.marker_prevalences
    if 2 ** len(prevalences) == M:
        cells = itertools.product(*[(1.0 - p, p) for p in prevalences])
        marker = np.array([np.prod(cell) for cell in cells])
    else:
        marker = np.full(M, 1.0 / M)
    probs = (1.0 - cfg.biomarker_uniform_mix) * marker + cfg.biomarker_uniform_mix / M
    return probs / probs.sum()


@dataclass
class _ArmLedger:
    """Running log-time samples per (biomarker, arm); arm 0 is control, arm k+1 treatment k."""

    n_biomarkers: int
    n_arms: int
    samples: list[list[list[float]]] = field(init=False)

    def __post_init__(self) -> None:
        self.samples = [[[] for _ in range(self.n_arms)] for _ in range(self.n_biomarkers)]

    def add(self, m: int, arm: int, value: float) -> None:
        self.samples[m][arm].append(value)

    def values(self, m: int, arm: int) -> np.ndarray:
        return np.asarray(self.samples[m][arm])

    def sizes(self) -> np.ndarray:
        return np.array([[len(a) for a in row] for row in self.samples])


def _prob_beats_control(treated: np.ndarray, control: np.ndarray) -> float:
    if len(treated) < 2 or len(control) < 2:
        return 0.5
    se = np.sqrt(max(treated.var(ddof=1) / len(treated) + control.var(ddof=1) / len(control), 1e-12))
    return float(ndtr((treated.mean() - control.mean()) / se))


def randomization_weights(ledger: _ArmLedger, is_open: np.ndarray, tcfg: TrialConfig) -> np.ndarray:
    """(M, K+1) assignment probabilities: column 0 control, column k+1 treatment k."""
    M, K = is_open.shape
    weights = np.zeros((M, K + 1))
    for m in range(M):
        arms = np.flatnonzero(is_open[m])
        control_weight = 1.0 / (1 + len(arms))
        weights[m, 0] = control_weight
        if not len(arms):
            continue
        if tcfg.adaptive:
            control = ledger.values(m, 0)
            scores = np.array([_prob_beats_control(ledger.values(m, k + 1), control) for k in arms])
            scores = np.maximum(scores, tcfg.randomization_floor)
        else:
            scores = np.ones(len(arms))
        weights[m, arms + 1] = (1.0 - control_weight) * scores / scores.sum()
    return weights


def _close_arms(ledger: _ArmLedger, is_open: np.ndarray, tcfg: TrialConfig) -> None:
    M, K = is_open.shape
    for m in range(M):
        control = ledger.values(m, 0)
        for k in np.flatnonzero(is_open[m]):
            treated = ledger.values(m, k + 1)
            if min(len(treated), len(control)) < tcfg.min_interim_n:
                continue
            res = stats.ttest_ind(treated, control, equal_var=False)
            t, p = float(res.statistic), float(res.pvalue)
            if not np.isfinite(t):
                continue
            reason = None
            if p < tcfg.stop_alpha_benefit and t > 0:
                reason = "benefit"
            elif p < tcfg.stop_alpha_harm and t < 0:
                reason = "harm"
            elif len(treated) >= tcfg.futility_min_n and abs(t) < tcfg.futility_t:
                reason = "futility"
            if reason:
                is_open[m, k] = False
                logger.debug("closed biomarker %d treatment %d for %s (t=%.2f, p=%.4f)", m, k, reason, t, p)


def _draw_arms(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cumulative = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cumulative[:, -1]
    return np.minimum((cumulative <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def simulate_trial(truth: list[GroupTruth], tcfg: TrialConfig, cfg: ScenarioConfig,
                   rng: np.random.Generator, weight_log: list[np.ndarray] | None = None) -> TrialData:
    K, M = cfg.n_treatments, cfg.n_biomarkers
    if len(truth) != K * M:
        raise ValueError(f"expected {K * M} group truths, got {len(truth)}")
    floor_total = tcfg.min_group_size * (K + 1) * M
    if tcfg.horizon + tcfg.max_extra_enrollment < floor_total:
        raise InfeasibleDesignError(
            f"horizon {tcfg.horizon} (+{tcfg.max_extra_enrollment} extra) cannot reach "
            f"{tcfg.min_group_size} subjects in each of {(K + 1) * M} arms"
        )

    nu = np.array([g.nu for g in truth])
    mu = np.array([g.mu for g in truth])
    beta_b = rng.standard_normal(M)
    gamma_b = tcfg.log_time_offset + rng.standard_normal(M)
    probs = biomarker_probabilities(cfg)

    ledger = _ArmLedger(M, K + 1)
    is_open = np.ones((M, K), dtype=bool)
    columns: dict[str, list[np.ndarray]] = {"s": [], "log_y": [], "treatment": [], "biomarker": []}

    def enroll(bio: np.ndarray, arm: np.ndarray) -> None:
        treated = arm > 0
        j = bio * K + np.maximum(arm - 1, 0)
        s = beta_b[bio] + treated * nu[j] + tcfg.sigma_s * rng.standard_normal(len(bio))
        log_y = gamma_b[bio] + treated * mu[j] + tcfg.sigma_y * rng.standard_normal(len(bio))
        columns["s"].append(s)
        columns["log_y"].append(log_y)
        columns["treatment"].append(arm - 1)
        columns["biomarker"].append(bio)
        for b, a, y in zip(bio, arm, log_y):
            ledger.add(int(b), int(a), float(y))

    enrolled = 0
    while enrolled < tcfg.horizon:
        size = min(tcfg.batch_size, tcfg.horizon - enrolled)
        weights = randomization_weights(ledger, is_open, tcfg)
        if weight_log is not None:
            weight_log.append(weights)
        bio = rng.choice(M, size=size, p=probs)
        enroll(bio, _draw_arms(weights[bio], rng))
        if tcfg.enable_stopping:
            _close_arms(ledger, is_open, tcfg)
        enrolled += size

    # Final periods: enrollment only into arms still below the floor.
    screened = 0
    deficit = tcfg.min_group_size - ledger.sizes()
    while np.any(deficit > 0):
        if screened >= tcfg.max_extra_enrollment:
            raise InfeasibleDesignError(
                f"group-size floor {tcfg.min_group_size} not reached after {screened} extra screenings"
            )
        bio = rng.choice(M, size=tcfg.batch_size, p=probs)
        screened += tcfg.batch_size
        take_bio, take_arm = [], []
        for b in bio:
            if deficit[b].max() <= 0:
                continue
            arm = int(np.argmax(deficit[b]))
            deficit[b, arm] -= 1
            take_bio.append(b)
            take_arm.append(arm)
        if take_bio:
            enroll(np.asarray(take_bio, dtype=int), np.asarray(take_arm, dtype=int))
        deficit = tcfg.min_group_size - ledger.sizes()
    logger.debug("trial enrolled %d subjects (%d screened past horizon)", sum(map(len, columns["s"])), screened)

    log_y = np.concatenate(columns["log_y"])
    data = TrialData(
        s=np.concatenate(columns["s"]),
        y_obs=np.exp(log_y),
        event=np.ones(len(log_y), dtype=bool),
        treatment=np.concatenate(columns["treatment"]).astype(int),
        biomarker=np.concatenate(columns["biomarker"]).astype(int),
        n_treatments=K,
        n_biomarkers=M,
    )
    if tcfg.censor is not None:
        data = apply_censoring(data, tcfg.censor.lower, tcfg.censor.upper, rng)
    return data


def apply_censoring(data: TrialData, lower: float, upper: float, rng: np.random.Generator) -> TrialData:
    if not lower < upper:
        raise ValueError("censoring window needs lower < upper")
    # 1 - U lies in (0, 1], so C lies in (lower, upper].
    c = lower + (upper - lower) * (1.0 - rng.random(data.n_subjects))
    censored = c < data.y_obs
    return replace(
        data,
        y_obs=np.where(censored, c, data.y_obs),
        event=data.event & ~censored,
    )
