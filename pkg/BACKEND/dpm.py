"""
Second stage and the interleaved sampler.

The DPM places a Dirichlet-process mixture of normals on the group vectors
x_j = (nu_j, mu_j, Z_j) with a conjugate NIW base measure. A sweep runs

    1. assignment scan with auxiliary components (n_aux fresh draws from G0)
    2. NIW-posterior refresh of every occupied cluster
    3. auxiliary-variable update of the concentration alpha
    4. per-group normal prior on (nu_j, mu_j) given Z_j from its cluster
    5. stage-1 Gibbs sweep under those priors

The "simple" second stage swaps 1-4 for a conjugate multivariate regression
of (nu, mu) on Z. The "null" second stage is the DPM over (mu_j, Z_j) with a
surrogate-free stage 1.

Cluster labels are 0-based and compact: exactly 0..k-1, all occupied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from scipy.stats import invwishart
from sklearn.cluster import KMeans

import SETTINGS
from BACKEND.api_models import DpmConfig, SecondStage, Stage1PriorConfig
from BACKEND.distributions import (
    GammaParams,
    NiwParams,
    cholesky,
    condition_gain,
    gamma_sample,
    niw_posterior,
    niw_sample_batch,
    precision_factors,
    symmetrize,
)
from BACKEND.kernels import assignment_scan
from BACKEND.stage1 import (
    EffectPriors,
    Stage1Design,
    Stage1Priors,
    Stage1State,
    completed_loglik,
    fit_initial_estimates,
    gibbs_update_stage1,
    initial_state,
)
from BACKEND.trialgen import TrialData

logger = logging.getLogger("surrogate_dpm.dpm")

# Floor on the weighted variances that set the base-measure scale.
MIN_BASE_VARIANCE = 1e-6


class ChainDivergenceError(RuntimeError):
    def __init__(self, sweep: int, fold: int | None = None) -> None:
        self.sweep = sweep
        self.fold = fold
        where = f" (fold {fold + 1})" if fold is not None else ""
        super().__init__(f"non-finite completed-data log-likelihood at sweep {sweep}{where}")


@dataclass(frozen=True)
class ClusterState:
    labels: np.ndarray
    phis: np.ndarray
    sigmas: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.phis.shape[0] != self.sigmas.shape[0]:
            raise ValueError("phis and sigmas disagree on the number of clusters")

    @property
    def n_clusters(self) -> int:
        return int(self.phis.shape[0])

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)

    def is_compact(self) -> bool:
        return np.array_equal(np.unique(self.labels), np.arange(self.n_clusters))


@dataclass(frozen=True)
class SimpleState:
    """(nu, mu) | Z ~ N([1, Z] @ coef, omega)."""

    coef: np.ndarray
    omega: np.ndarray


@dataclass(frozen=True)
class PosteriorDraws:
    nu: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    xi: np.ndarray
    sigma_s: np.ndarray
    sigma_y: np.ndarray
    labels: np.ndarray
    alpha: np.ndarray
    n_clusters: np.ndarray
    # Per draw: (phis, sigmas) of the DPM clusters, or (coef, omega[None]) for the simple stage.
    cluster_params: tuple
    iterations: np.ndarray
    second_stage: SecondStage

    @property
    def n_draws(self) -> int:
        return int(len(self.iterations))


def relabel_by_appearance(labels: np.ndarray) -> np.ndarray:
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse]


def build_base_measure(effects: np.ndarray, sizes: np.ndarray, d: int, n_groups: int,
                       inverted: bool = False) -> NiwParams:
    """
    G0 from the initial estimates.

    Location is the size-weighted mean over rows with finite entries; the
    scale matrix is diag(weighted inverse variances), or diag(weighted
    variances) when `inverted`. dof = d + 2 and kappa = 1 / n_groups.
    """
    if n_groups < 2:
        raise ValueError("the base measure needs at least 2 groups")
    effects = np.asarray(effects, dtype=float)
    weights = np.asarray(sizes, dtype=float)
    p = effects.shape[1]
    location = np.empty(p)
    variance = np.empty(p)
    for col in range(p):
        ok = np.isfinite(effects[:, col])
        w = weights[ok]
        if w.sum() <= 0:
            raise ValueError(f"zero total weight for base-measure component {col}")
        location[col] = np.average(effects[ok, col], weights=w)
        variance[col] = np.average((effects[ok, col] - location[col]) ** 2, weights=w)
    variance = np.maximum(variance, MIN_BASE_VARIANCE)
    scale = np.diag(variance if inverted else 1.0 / variance)
    return NiwParams(location=location, kappa=1.0 / n_groups, dof=d + 2, scale_matrix=scale)


def init_clusters(effects: np.ndarray, k_init: int, base: NiwParams, alpha_prior: GammaParams,
                  rng: np.random.Generator) -> ClusterState:
    """k-means labels, each cluster's parameters drawn from its NIW posterior."""
    n = effects.shape[0]
    if not 1 <= k_init <= n:
        raise ValueError(f"k_init must be in 1..{n}, got {k_init}")
    if k_init == 1:
        labels = np.zeros(n, dtype=int)
    else:
        sd = effects.std(axis=0)
        standardized = (effects - effects.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        km = KMeans(n_clusters=k_init, n_init=10, random_state=int(rng.integers(2**31 - 1)))
        labels = relabel_by_appearance(km.fit_predict(standardized))
    k = int(labels.max()) + 1
    draws = niw_sample_batch([niw_posterior(base, effects[labels == c]) for c in range(k)], rng)
    return ClusterState(
        labels=labels,
        phis=draws.phis,
        sigmas=draws.sigmas,
        alpha=float(gamma_sample(alpha_prior, rng)),
    )


def update_assignments(state: ClusterState, effects: np.ndarray, base: NiwParams, n_aux: int,
                       rng: np.random.Generator, prior_only: bool = False, groups=None) -> ClusterState:
    """
    One auxiliary-component scan over the groups in index order.

    `prior_only` drops the normal kernel, leaving the Chinese-restaurant
    weights; `groups` restricts the scan to the listed indices. The n_aux
    fresh G0 draws per group are made up front.
    """
    if n_aux < 1:
        raise ValueError("n_aux must be >= 1")
    order = np.arange(len(state.labels)) if groups is None else np.asarray(groups, dtype=np.int64)
    n_scan, k = len(order), state.n_clusters
    p = state.phis.shape[1]
    aux = niw_sample_batch(base, rng, size=n_scan * n_aux)
    uniforms = rng.random(n_scan)

    capacity = k + n_scan
    phis = np.zeros((capacity, p))
    sigmas = np.zeros((capacity, p, p))
    factors = np.zeros((capacity, p, p))
    half_log_dets = np.zeros(capacity)
    counts = np.zeros(capacity, dtype=np.int64)
    phis[:k], sigmas[:k] = state.phis, state.sigmas
    factors[:k], half_log_dets[:k] = precision_factors(state.sigmas)
    counts[:k] = state.counts()
    labels = state.labels.astype(np.int64)

    n_slots = assignment_scan(
        labels, np.ascontiguousarray(effects, dtype=float), order, counts, phis, sigmas, factors, half_log_dets, k,
        aux.phis.reshape(n_scan, n_aux, p), aux.sigmas.reshape(n_scan, n_aux, p, p),
        aux.factors.reshape(n_scan, n_aux, p, p), aux.half_log_dets.reshape(n_scan, n_aux),
        float(np.log(state.alpha / n_aux)), uniforms, prior_only,
    )
    live = np.flatnonzero(counts[:n_slots] > 0)
    compact = np.full(n_slots, -1, dtype=np.int64)
    compact[live] = np.arange(len(live))
    return ClusterState(labels=compact[labels], phis=phis[live], sigmas=sigmas[live], alpha=state.alpha)


def update_cluster_params(state: ClusterState, effects: np.ndarray, base: NiwParams,
                          rng: np.random.Generator) -> ClusterState:
    if not state.is_compact():
        raise ValueError("cluster labels are not compact")
    draws = niw_sample_batch(
        [niw_posterior(base, effects[state.labels == c]) for c in range(state.n_clusters)], rng)
    return replace(state, phis=draws.phis, sigmas=draws.sigmas)


def alpha_mixture_weight(shape: float, rate: float, k: int, n: int, log_z: float, literal: bool = False) -> float:
    """Probability of the Gamma(a + k, b - log z) component."""
    numerator = shape + k + 1 if literal else shape + k - 1
    odds = numerator / (n * (rate - log_z))
    return odds / (1.0 + odds)


def update_alpha(k: int, n: int, prior: GammaParams, alpha_old: float, rng: np.random.Generator,
                 literal: bool = False) -> float:
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    log_z = float(np.log(rng.beta(alpha_old + 1.0, n)))
    pi = alpha_mixture_weight(prior.shape, prior.rate, k, n, log_z, literal)
    shape = prior.shape + k if rng.random() < pi else prior.shape + k - 1
    return float(gamma_sample(GammaParams(shape, prior.rate - log_z), rng))


def conditional_effect_priors(state: ClusterState, z: np.ndarray) -> EffectPriors:
    """Normal prior on the effect block of each group given its Z from its cluster."""
    n = len(state.labels)
    z = np.asarray(z, dtype=float).reshape(n, -1)
    p = state.phis.shape[1]
    observed = np.arange(p - z.shape[1], p)
    e = p - len(observed)
    gains = np.empty((state.n_clusters, e, len(observed)))
    precisions = np.empty((state.n_clusters, e, e))
    for c in range(state.n_clusters):
        _, gains[c], cond_cov = condition_gain(state.sigmas[c], observed)
        precisions[c] = symmetrize(linalg.cho_solve(linalg.cho_factor(cond_cov, lower=True), np.eye(e)))
    labels = state.labels
    phis = state.phis[labels]
    shift = np.einsum("gij,gj->gi", gains[labels], z - phis[:, observed])
    return EffectPriors(means=phis[:, :e] + shift, precisions=precisions[labels])


def update_simple(effects: np.ndarray, z: np.ndarray, base: NiwParams, coef_prior_scale: float,
                  rng: np.random.Generator) -> SimpleState:
    """
    Conjugate draw for the regression of the effect block on [1, Z].

    Prior: coef ~ MN(0, coef_prior_scale * I, omega), omega ~ IW(e + 2, base scale block).
    """
    n = effects.shape[0]
    z = np.asarray(z, dtype=float).reshape(n, -1)
    e = effects.shape[1] - z.shape[1]
    y = effects[:, :e]
    x = np.column_stack([np.ones(n), z])
    q = x.shape[1]
    psi0 = base.scale_matrix[:e, :e]

    precision = x.T @ x + np.eye(q) / coef_prior_scale
    prec_factor = linalg.cho_factor(precision, lower=True)
    v_n = linalg.cho_solve(prec_factor, np.eye(q))
    c_n = linalg.cho_solve(prec_factor, x.T @ y)
    psi_n = symmetrize(psi0 + y.T @ y - c_n.T @ precision @ c_n)

    omega = invwishart.rvs(df=e + 2 + n, scale=psi_n, random_state=rng)
    omega = symmetrize(np.asarray(omega, dtype=float).reshape(e, e))
    coef = c_n + cholesky(symmetrize(v_n)) @ rng.standard_normal((q, e)) @ cholesky(omega).T
    return SimpleState(coef=coef, omega=omega)


def simple_effect_priors(state: SimpleState, z: np.ndarray) -> EffectPriors:
    z = np.asarray(z, dtype=float)
    z = z.reshape(len(z), -1)
    x = np.column_stack([np.ones(len(z)), z])
    e = state.omega.shape[0]
    precision = symmetrize(linalg.cho_solve(linalg.cho_factor(state.omega, lower=True), np.eye(e)))
    return EffectPriors(means=x @ state.coef, precisions=np.broadcast_to(precision, (len(z), e, e)).copy())


def _effects(state: Stage1State, z: np.ndarray, surrogate: bool) -> np.ndarray:
    cols = [state.nu, state.mu] if surrogate else [state.mu]
    return np.column_stack(cols + [z])


def run_chain(data: TrialData, z, cfg: DpmConfig, priors: Stage1PriorConfig, rng: np.random.Generator,
              fold: int | None = None) -> PosteriorDraws:
    """Run one chain of the full two-stage sampler and return the retained draws."""
    second_stage = cfg.second_stage
    surrogate = second_stage != SecondStage.null
    n_groups = data.n_groups
    z = np.asarray(z, dtype=float).reshape(n_groups, -1)
    d = z.shape[1]

    design = Stage1Design.from_data(data, model_surrogate=surrogate)
    estimates = fit_initial_estimates(data)
    raw = [estimates.nu_hat, estimates.mu_hat] if surrogate else [estimates.mu_hat]
    base = build_base_measure(np.column_stack(raw + [z]), estimates.n, d, n_groups, cfg.scale_matrix_inverted)
    alpha_prior = GammaParams(cfg.alpha_shape, cfg.alpha_rate)
    state = initial_state(estimates, design)
    # Seed the hidden effects from the base location so the first second-stage step sees finite rows.
    missing_mu = ~np.isfinite(estimates.mu_hat)
    if missing_mu.any():
        mu = state.mu.copy()
        mu[missing_mu] = base.location[1 if surrogate else 0]
        state = replace(state, mu=mu)
    stage1_priors = Stage1Priors.from_config(priors, effect_priors=())

    chain = cfg.chain
    clusters = None
    if second_stage != SecondStage.simple:
        k_init = chain.k_init or min(SETTINGS.K_INIT_MAX, n_groups)
        clusters = init_clusters(_effects(state, z, surrogate), min(k_init, n_groups), base, alpha_prior, rng)

    n_keep = chain.n_retained
    kept: dict[str, list] = {name: [] for name in (
        "nu", "mu", "eta", "xi", "sigma_s", "sigma_y", "labels", "alpha", "n_clusters", "params", "iterations")}

    for sweep in range(chain.n_iter):
        effects = _effects(state, z, surrogate)
        if clusters is None:
            simple = update_simple(effects, z, base, cfg.simple_coef_prior_scale, rng)
            effect_priors = simple_effect_priors(simple, z)
        else:
            clusters = update_assignments(clusters, effects, base, cfg.n_aux, rng)
            clusters = update_cluster_params(clusters, effects, base, rng)
            alpha = update_alpha(clusters.n_clusters, n_groups, alpha_prior, clusters.alpha, rng,
                                 literal=cfg.literal_alpha)
            clusters = replace(clusters, alpha=alpha)
            effect_priors = conditional_effect_priors(clusters, z)

        state = gibbs_update_stage1(state, stage1_priors.with_effect_priors(effect_priors), design, rng)
        if not np.isfinite(completed_loglik(state, design)):
            raise ChainDivergenceError(sweep, fold)

        if clusters is not None and (sweep + 1) % SETTINGS.LOG_EVERY == 0:
            logger.debug("sweep %d: %d clusters, alpha=%.3f", sweep + 1, clusters.n_clusters, clusters.alpha)

        if sweep >= chain.burn_in and (sweep - chain.burn_in + 1) % chain.thin == 0 and len(kept["nu"]) < n_keep:
            kept["nu"].append(state.nu)
            kept["mu"].append(state.mu)
            kept["eta"].append(state.beta_b)
            kept["xi"].append(state.gamma_b)
            kept["sigma_s"].append(state.sigma_s)
            kept["sigma_y"].append(state.sigma_y)
            kept["iterations"].append(sweep)
            if clusters is None:
                kept["labels"].append(np.zeros(n_groups, dtype=int))
                kept["alpha"].append(np.nan)
                kept["n_clusters"].append(1)
                kept["params"].append((simple.coef, simple.omega[None]))
            else:
                kept["labels"].append(clusters.labels)
                kept["alpha"].append(clusters.alpha)
                kept["n_clusters"].append(clusters.n_clusters)
                kept["params"].append((clusters.phis, clusters.sigmas))

    return PosteriorDraws(
        nu=np.array(kept["nu"]),
        mu=np.array(kept["mu"]),
        eta=np.array(kept["eta"]),
        xi=np.array(kept["xi"]),
        sigma_s=np.array(kept["sigma_s"], dtype=float),
        sigma_y=np.array(kept["sigma_y"], dtype=float),
        labels=np.array(kept["labels"], dtype=int),
        alpha=np.array(kept["alpha"], dtype=float),
        n_clusters=np.array(kept["n_clusters"], dtype=int),
        cluster_params=tuple(kept["params"]),
        iterations=np.array(kept["iterations"], dtype=int),
        second_stage=second_stage,
    )
