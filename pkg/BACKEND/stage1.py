"""
Stage 1: saturated-mean Gaussian regressions for the surrogate S and log-time.

    S_i      ~ N(eta_m + nu_j * W_i, sigma_s^2)
    log Y_i  ~ N(xi_m  + mu_j * W_i, sigma_y^2)

with one block of coefficients per biomarker signature m. The second stage
supplies a normal prior on each (nu_j, mu_j) pair; the Gibbs sweep draws every
biomarker block jointly, so the coupling between the two regressions is exact.
Right-censored log-times are completed by truncated-normal data augmentation.

Precision priors are Gamma(shape, rate) on 1/sigma^2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from BACKEND.api_models import Stage1PriorConfig
from BACKEND.distributions import LOG_2PI, GammaParams, gamma_sample, trunc_normal_sample
from BACKEND.trialgen import CONTROL, TrialData

logger = logging.getLogger("surrogate_dpm.stage1")


class MissingCellError(ValueError):
    def __init__(self, m: int, k: int, detail: str = "no subjects") -> None:
        self.m = m
        self.k = k
        super().__init__(f"biomarker {m + 1}, treatment {k + 1}: {detail}")


@dataclass(frozen=True)
class InitialEstimates:
    nu_hat: np.ndarray
    mu_hat: np.ndarray
    se_nu: np.ndarray
    se_mu: np.ndarray
    n: np.ndarray
    eta_hat: np.ndarray
    xi_hat: np.ndarray


@dataclass(frozen=True)
class EffectPriors:
    """Normal priors on each group's effect block: means (G, e), precisions (G, e, e)."""

    means: np.ndarray
    precisions: np.ndarray

    def __post_init__(self) -> None:
        if self.means.ndim != 2 or self.precisions.shape != self.means.shape + self.means.shape[1:]:
            raise ValueError(f"prior means {self.means.shape} and precisions {self.precisions.shape} disagree")

    def __len__(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @classmethod
    def from_params(cls, params) -> "EffectPriors":
        params = list(params)
        if not params:
            return cls(np.empty((0, 0)), np.empty((0, 0, 0)))
        dims = {p.dim for p in params}
        if len(dims) != 1:
            raise ValueError(f"effect priors mix dimensions {sorted(dims)}")
        eye = np.eye(dims.pop())
        return cls(
            means=np.array([p.mean for p in params]),
            precisions=np.array([linalg.cho_solve((p.chol, True), eye) for p in params]),
        )


@dataclass(frozen=True)
class Stage1Priors:
    nuisance_var: float
    effect_priors: EffectPriors
    sigma_prior: GammaParams
    nuisance_cov: float = 0.0

    def __post_init__(self) -> None:
        if self.nuisance_var <= 0:
            raise ValueError("nuisance_var must be > 0")
        if abs(self.nuisance_cov) >= self.nuisance_var:
            raise ValueError("nuisance prior covariance must be positive definite")
        if not isinstance(self.effect_priors, EffectPriors):
            object.__setattr__(self, "effect_priors", EffectPriors.from_params(self.effect_priors))

    @classmethod
    def from_config(cls, cfg: Stage1PriorConfig, effect_priors) -> "Stage1Priors":
        return cls(
            nuisance_var=cfg.nuisance_var,
            nuisance_cov=cfg.nuisance_cov,
            effect_priors=effect_priors,
            sigma_prior=GammaParams(cfg.precision_shape, cfg.precision_rate),
        )

    def with_effect_priors(self, effect_priors) -> "Stage1Priors":
        return replace(self, effect_priors=effect_priors)


@dataclass(frozen=True)
class Stage1State:
    beta_b: np.ndarray
    nu: np.ndarray
    gamma_b: np.ndarray
    mu: np.ndarray
    sigma_s: float
    sigma_y: float
    imputed_logy: np.ndarray


@dataclass(frozen=True)
class Stage1Design:
    """Data arranged for the sweep: per-(biomarker, arm) cells, arm 0 = control."""

    n_treatments: int
    n_biomarkers: int
    s: np.ndarray
    log_y: np.ndarray
    biomarker: np.ndarray
    treated: np.ndarray
    group: np.ndarray
    cell: np.ndarray
    y_observed: np.ndarray
    censored: np.ndarray
    s_count: np.ndarray
    s_sum: np.ndarray
    y_count: np.ndarray
    model_surrogate: bool

    @classmethod
    def from_data(cls, data: TrialData, model_surrogate: bool = True) -> "Stage1Design":
        K, M = data.n_treatments, data.n_biomarkers
        n_cells = M * (K + 1)
        cell = data.biomarker * (K + 1) + (data.treatment + 1)
        observed = data.outcome_observed
        return cls(
            n_treatments=K,
            n_biomarkers=M,
            s=data.s,
            log_y=data.log_y,
            biomarker=data.biomarker,
            treated=data.treatment != CONTROL,
            group=data.group_index(),
            cell=cell,
            y_observed=observed,
            censored=np.flatnonzero(observed & ~data.event),
            s_count=np.bincount(cell, minlength=n_cells).reshape(M, K + 1),
            s_sum=np.bincount(cell, weights=data.s, minlength=n_cells).reshape(M, K + 1),
            y_count=np.bincount(cell[observed], minlength=n_cells).reshape(M, K + 1),
            model_surrogate=model_surrogate,
        )

    def completed_logy(self, state: Stage1State) -> np.ndarray:
        log_y = self.log_y.copy()
        log_y[self.censored] = state.imputed_logy
        return log_y


def _sample_var(x: np.ndarray, fallback: float) -> float:
    return float(x.var(ddof=1)) if len(x) >= 2 else fallback


def _pooled_var(values: np.ndarray, cells: np.ndarray) -> float:
    if len(values) == 0:
        return 1.0
    means = np.bincount(cells, weights=values) / np.maximum(np.bincount(cells), 1)
    resid = values - means[cells]
    dof = max(len(values) - len(np.unique(cells)), 1)
    return max(float(resid @ resid) / dof, 1e-8)


def fit_initial_estimates(data: TrialData) -> InitialEstimates:
    """
    Least-squares fits of the saturated models.

    With one free mean per cell, nu_hat_j is the treated-minus-control difference of
    mean S within the biomarker, and mu_hat_j the same difference of mean log-time.
    Groups whose outcomes are all hidden get NaN for mu_hat and se_mu.
    """
    K, M = data.n_treatments, data.n_biomarkers
    G = K * M
    group = data.group_index()
    observed = data.outcome_observed
    log_y = data.log_y
    cells = data.biomarker * (K + 1) + (data.treatment + 1)
    var_s = _pooled_var(data.s, cells)
    var_y = _pooled_var(log_y[observed], cells[observed])

    nu_hat, mu_hat = np.full(G, np.nan), np.full(G, np.nan)
    se_nu, se_mu = np.full(G, np.nan), np.full(G, np.nan)
    n = np.zeros(G, dtype=int)
    eta_hat, xi_hat = np.zeros(M), np.zeros(M)

    for m in range(M):
        control = (data.biomarker == m) & (data.treatment == CONTROL)
        if not control.any():
            raise MissingCellError(m, 0, "no control subjects in this biomarker")
        control_y = control & observed
        s_c = data.s[control]
        eta_hat[m] = s_c.mean()
        xi_hat[m] = log_y[control_y].mean() if control_y.any() else np.nan
        for k in range(K):
            j = m * K + k
            in_group = group == j
            if not in_group.any():
                raise MissingCellError(m, k)
            s_j = data.s[in_group]
            n[j] = len(s_j)
            nu_hat[j] = s_j.mean() - eta_hat[m]
            se_nu[j] = np.sqrt(_sample_var(s_j, var_s) / len(s_j) + _sample_var(s_c, var_s) / len(s_c))

            group_y = in_group & observed
            if not group_y.any():
                continue
            if not control_y.any():
                raise MissingCellError(m, k, "no observed control outcomes in this biomarker")
            y_j, y_c = log_y[group_y], log_y[control_y]
            mu_hat[j] = y_j.mean() - xi_hat[m]
            se_mu[j] = np.sqrt(_sample_var(y_j, var_y) / len(y_j) + _sample_var(y_c, var_y) / len(y_c))

    return InitialEstimates(nu_hat, mu_hat, se_nu, se_mu, n, eta_hat, xi_hat)


def initial_state(estimates: InitialEstimates, design: Stage1Design) -> Stage1State:
    xi = np.where(np.isfinite(estimates.xi_hat), estimates.xi_hat, np.nanmean(estimates.xi_hat))
    mu = np.where(np.isfinite(estimates.mu_hat), estimates.mu_hat, np.nanmean(estimates.mu_hat))
    if design.model_surrogate:
        beta_b, nu, sigma_s = estimates.eta_hat.copy(), estimates.nu_hat.copy(), 1.0
    else:
        beta_b, nu, sigma_s = np.full_like(xi, np.nan), np.full_like(mu, np.nan), np.nan
    return Stage1State(
        beta_b=beta_b,
        nu=nu,
        gamma_b=xi,
        mu=mu,
        sigma_s=sigma_s,
        sigma_y=1.0,
        imputed_logy=design.log_y[design.censored] + 0.5,
    )


def _add_regression(Q: np.ndarray, h: np.ndarray, idx: np.ndarray, counts: np.ndarray,
                    sums: np.ndarray, prec: float) -> None:
    # idx[0] is the biomarker main effect, idx[1:] the treatment effects; counts/sums are (M, arms).
    base, effects = idx[0], idx[1:]
    Q[:, base, base] += prec * counts.sum(axis=1)
    Q[:, base, effects] += prec * counts[:, 1:]
    Q[:, effects, base] += prec * counts[:, 1:]
    Q[:, effects, effects] += prec * counts[:, 1:]
    h[:, base] += prec * sums.sum(axis=1)
    h[:, effects] += prec * sums[:, 1:]


def _impute(state: Stage1State, design: Stage1Design, rng: np.random.Generator) -> np.ndarray:
    idx = design.censored
    if idx.size == 0:
        return np.empty(0)
    mean = state.gamma_b[design.biomarker[idx]] + np.where(
        design.treated[idx], state.mu[np.maximum(design.group[idx], 0)], 0.0
    )
    return np.atleast_1d(trunc_normal_sample(mean, state.sigma_y, design.log_y[idx], rng))


def gibbs_update_stage1(state: Stage1State, priors: Stage1Priors, data: Stage1Design | TrialData,
                        rng: np.random.Generator) -> Stage1State:
    """One sweep: impute censored log-times, draw every biomarker block, then both precisions."""
    design = data if isinstance(data, Stage1Design) else Stage1Design.from_data(data)
    K, M = design.n_treatments, design.n_biomarkers
    surrogate = design.model_surrogate
    effect_priors = priors.effect_priors
    if len(effect_priors) != K * M:
        raise ValueError(f"expected {K * M} effect priors, got {len(effect_priors)}")
    effect_dim = 2 if surrogate else 1
    if effect_priors.dim != effect_dim:
        raise ValueError(f"effect priors have dimension {effect_priors.dim}, expected {effect_dim}")

    imputed = _impute(state, design, rng)
    log_y = design.log_y.copy()
    log_y[design.censored] = imputed
    y_obs = design.y_observed
    n_cells = M * (K + 1)
    y_sum = np.bincount(design.cell[y_obs], weights=log_y[y_obs], minlength=n_cells).reshape(M, K + 1)

    size = effect_dim * (K + 1)
    Q = np.zeros((M, size, size))
    h = np.zeros((M, size))
    if surrogate:
        s_idx = np.arange(K + 1)
        y_idx = np.arange(K + 1, 2 * K + 2)
        nuisance_cov = np.array([[priors.nuisance_var, priors.nuisance_cov],
                                 [priors.nuisance_cov, priors.nuisance_var]])
        nuisance_pos = np.array([s_idx[0], y_idx[0]])
        Q[:, nuisance_pos[:, None], nuisance_pos[None, :]] += linalg.cho_solve(
            linalg.cho_factor(nuisance_cov, lower=True), np.eye(2))
        effect_pos = np.column_stack([s_idx[1:], y_idx[1:]])
    else:
        y_idx = np.arange(K + 1)
        Q[:, y_idx[0], y_idx[0]] += 1.0 / priors.nuisance_var
        effect_pos = y_idx[1:, None]

    # Group j = m * K + k sits in block m at positions effect_pos[k].
    precisions = effect_priors.precisions.reshape(M, K, effect_dim, effect_dim)
    prior_h = np.einsum("gij,gj->gi", effect_priors.precisions, effect_priors.means).reshape(M, K, effect_dim)
    for k in range(K):
        pos = effect_pos[k]
        Q[:, pos[:, None], pos[None, :]] += precisions[:, k]
        h[:, pos] += prior_h[:, k]
    if surrogate:
        _add_regression(Q, h, s_idx, design.s_count, design.s_sum, 1.0 / state.sigma_s ** 2)
    _add_regression(Q, h, y_idx, design.y_count, y_sum, 1.0 / state.sigma_y ** 2)

    chol = np.linalg.cholesky(Q)
    mean = np.linalg.solve(Q, h[..., None])[..., 0]
    noise = rng.standard_normal((M, size))
    draw = mean + np.linalg.solve(np.swapaxes(chol, -1, -2), noise[..., None])[..., 0]

    beta_b, nu = state.beta_b.copy(), state.nu.copy()
    if surrogate:
        beta_b = draw[:, s_idx[0]]
        nu = draw[:, s_idx[1:]].reshape(-1)
    gamma_b = draw[:, y_idx[0]]
    mu = draw[:, y_idx[1:]].reshape(-1)

    a, b = priors.sigma_prior.shape, priors.sigma_prior.rate
    sigma_s = state.sigma_s
    if surrogate:
        resid_s = design.s - beta_b[design.biomarker] - np.where(design.treated, nu[np.maximum(design.group, 0)], 0.0)
        prec_draw = gamma_sample(GammaParams(a + 0.5 * len(resid_s), b + 0.5 * resid_s @ resid_s), rng)
        sigma_s = float(1.0 / np.sqrt(prec_draw))
    fitted_y = gamma_b[design.biomarker] + np.where(design.treated, mu[np.maximum(design.group, 0)], 0.0)
    resid_y = (log_y - fitted_y)[y_obs]
    prec_draw = gamma_sample(GammaParams(a + 0.5 * len(resid_y), b + 0.5 * resid_y @ resid_y), rng)

    return Stage1State(
        beta_b=beta_b,
        nu=nu,
        gamma_b=gamma_b,
        mu=mu,
        sigma_s=sigma_s,
        sigma_y=float(1.0 / np.sqrt(prec_draw)),
        imputed_logy=imputed,
    )


def completed_loglik(state: Stage1State, design: Stage1Design) -> float:
    """Log-likelihood of S and the completed log-times under the current state."""
    total = 0.0
    treated_group = np.maximum(design.group, 0)
    if design.model_surrogate:
        resid = design.s - state.beta_b[design.biomarker] - np.where(design.treated, state.nu[treated_group], 0.0)
        total += -0.5 * (len(resid) * (LOG_2PI + 2 * np.log(state.sigma_s)) + resid @ resid / state.sigma_s ** 2)
    log_y = design.completed_logy(state)
    obs = design.y_observed
    resid = (log_y - state.gamma_b[design.biomarker] - np.where(design.treated, state.mu[treated_group], 0.0))[obs]
    total += -0.5 * (len(resid) * (LOG_2PI + 2 * np.log(state.sigma_y)) + resid @ resid / state.sigma_y ** 2)
    return float(total)
