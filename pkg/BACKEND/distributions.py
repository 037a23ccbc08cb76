"""
Probability kernels used by the samplers.

Multivariate normal, normal-inverse-Wishart (NIW), Gamma, skew-normal and
lower-truncated normal: densities and draws. Covariances are handled through
their Cholesky factors; NIW draws come from the Bartlett decomposition of the
Wishart precision, and each draw carries its precision factor.

NIW convention: (location m, kappa, dof, scale_matrix Psi) with
    Sigma ~ Inverse-Wishart(dof, Psi),   phi | Sigma ~ N(m, Sigma / kappa).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.special import gammaln, ndtr, ndtri
from scipy.stats import skewnorm

from BACKEND.kernels import niw_from_bartlett

LOG_2PI = float(np.log(2.0 * np.pi))
SYMMETRY_TOL = 1e-10
# Standardized truncation point above which the exponential-rejection sampler takes over.
TAIL_SWITCH = 5.0


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def check_symmetric(a: np.ndarray, name: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) >= SYMMETRY_TOL:
        raise ValueError(f"{name} is not symmetric")


def cholesky(a: np.ndarray) -> np.ndarray:
    # Lower factor; raises numpy.linalg.LinAlgError when a is not positive definite.
    return linalg.cholesky(a, lower=True)


@dataclass(frozen=True)
class MvnParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        check_symmetric(cov, "cov")
        if mean.shape[0] != cov.shape[0]:
            raise ValueError(f"mean length {mean.shape[0]} does not match cov dimension {cov.shape[0]}")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @cached_property
    def chol(self) -> np.ndarray:
        return cholesky(self.cov)


@dataclass(frozen=True)
class NiwParams:
    location: np.ndarray
    kappa: float
    dof: float
    scale_matrix: np.ndarray

    def __post_init__(self) -> None:
        location = np.atleast_1d(np.asarray(self.location, dtype=float))
        scale = np.atleast_2d(np.asarray(self.scale_matrix, dtype=float))
        object.__setattr__(self, "location", location)
        object.__setattr__(self, "scale_matrix", scale)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "dof", float(self.dof))
        check_symmetric(scale, "scale_matrix")
        if location.shape[0] != scale.shape[0]:
            raise ValueError("location length does not match scale_matrix dimension")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if self.dof < self.dim:
            raise ValueError(f"dof must be >= {self.dim}, got {self.dof}")

    @property
    def dim(self) -> int:
        return int(self.location.shape[0])


@dataclass(frozen=True)
class GammaParams:
    shape: float
    rate: float

    def __post_init__(self) -> None:
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"Gamma shape and rate must be > 0, got ({self.shape}, {self.rate})")


def mvn_logpdf(x, params: MvnParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != params.dim:
        raise ValueError(f"x has dimension {x.shape[0]}, expected {params.dim}")
    chol = params.chol
    z = linalg.solve_triangular(chol, x - params.mean, lower=True)
    return float(-0.5 * (params.dim * LOG_2PI + z @ z) - np.sum(np.log(np.diag(chol))))


def precision_factors(covs) -> tuple[np.ndarray, np.ndarray]:
    """
    Lower factors T with inverse(cov) = T T' for a stack of covariances, and
    the half log-determinants of the covariances.
    """
    factors = np.linalg.cholesky(np.linalg.inv(np.asarray(covs, dtype=float)))
    return factors, -np.log(np.diagonal(factors, axis1=-2, axis2=-1)).sum(axis=-1)


def mvn_sample(params: MvnParams, rng: np.random.Generator) -> np.ndarray:
    return params.mean + params.chol @ rng.standard_normal(params.dim)


def condition_gain(cov: np.ndarray, observed_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Schur-complement pieces for conditioning on `observed_idx`.

    Returns (free indices, regression gain, conditional covariance); the
    conditional mean is mean_free + gain @ (x_obs - mean_obs).
    """
    free_idx = np.setdiff1d(np.arange(cov.shape[0]), observed_idx)
    cov_oo = cov[np.ix_(observed_idx, observed_idx)]
    cov_fo = cov[np.ix_(free_idx, observed_idx)]
    factor = linalg.cho_factor(cov_oo, lower=True)
    gain = linalg.cho_solve(factor, cov_fo.T).T
    cond_cov = symmetrize(cov[np.ix_(free_idx, free_idx)] - gain @ cov_fo.T)
    return free_idx, gain, cond_cov


def mvn_condition(params: MvnParams, observed_idx, observed_values) -> MvnParams:
    """Conditional normal of the unobserved coordinates."""
    observed_idx = np.asarray(observed_idx, dtype=int).ravel()
    if observed_idx.size == 0:
        return params
    if observed_idx.size >= params.dim:
        raise ValueError("at least one coordinate must remain unobserved")
    observed_values = np.atleast_1d(np.asarray(observed_values, dtype=float))
    free_idx, gain, cond_cov = condition_gain(params.cov, observed_idx)
    mean = params.mean[free_idx] + gain @ (observed_values - params.mean[observed_idx])
    return MvnParams(mean, cond_cov)


def niw_posterior(prior: NiwParams, data) -> NiwParams:
    data = np.asarray(data, dtype=float).reshape(-1, prior.dim)
    n = data.shape[0]
    if n == 0:
        return prior
    xbar = data.mean(axis=0)
    centred = data - xbar
    scatter = centred.T @ centred
    kappa_n = prior.kappa + n
    offset = xbar - prior.location
    scale = prior.scale_matrix + scatter + (prior.kappa * n / kappa_n) * np.outer(offset, offset)
    return NiwParams(
        location=(prior.kappa * prior.location + n * xbar) / kappa_n,
        kappa=kappa_n,
        dof=prior.dof + n,
        scale_matrix=symmetrize(scale),
    )


def niw_marginal_logpdf(x, prior: NiwParams) -> float:
    """Log multivariate Student-t predictive: the integral of N(x | omega) over the NIW."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = prior.dim
    if x.shape[0] != p:
        raise ValueError(f"x has dimension {x.shape[0]}, expected {p}")
    df = prior.dof - p + 1.0
    if df <= 0:
        raise ValueError(f"NIW predictive undefined for dof={prior.dof} with dimension {p}")
    shape = prior.scale_matrix * (prior.kappa + 1.0) / (prior.kappa * df)
    chol = cholesky(shape)
    z = linalg.solve_triangular(chol, x - prior.location, lower=True)
    return float(
        gammaln(0.5 * (df + p)) - gammaln(0.5 * df)
        - 0.5 * p * np.log(df * np.pi)
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * (df + p) * np.log1p(z @ z / df)
    )


@dataclass(frozen=True)
class NiwDraws:
    """Stacked NIW draws with their precision factors (see precision_factors)."""

    phis: np.ndarray
    sigmas: np.ndarray
    factors: np.ndarray
    half_log_dets: np.ndarray


def niw_sample_batch(params: NiwParams | Sequence[NiwParams], rng: np.random.Generator,
                     size: int = 1) -> NiwDraws:
    """`size` independent draws from one NiwParams, or one draw per entry of a sequence."""
    if isinstance(params, NiwParams):
        rows, index = [params], np.zeros(int(size), dtype=int)
    else:
        rows = list(params)
        if not rows:
            raise ValueError("need at least one NIW parameter set")
        index = np.arange(len(rows))
    n, p = len(index), rows[0].dim
    chol_inv = np.linalg.cholesky(np.linalg.inv(np.array([r.scale_matrix for r in rows])))[index]
    locations = np.array([r.location for r in rows])[index]
    inv_sqrt_kappas = 1.0 / np.sqrt(np.array([r.kappa for r in rows]))[index]
    dofs = np.array([r.dof for r in rows])[index]
    normals = rng.standard_normal((n, p, p))
    chis = rng.chisquare(dofs[:, None] - np.arange(p))
    z = rng.standard_normal((n, p))
    return NiwDraws(*niw_from_bartlett(chol_inv, normals, chis, z, locations, inv_sqrt_kappas))


def niw_sample(params: NiwParams, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    draws = niw_sample_batch(params, rng)
    return draws.phis[0], draws.sigmas[0]


def gamma_sample(params: GammaParams, rng: np.random.Generator, size=None):
    return rng.gamma(params.shape, 1.0 / params.rate, size=size)


def skewnorm_sample(shape: float, rng: np.random.Generator, size: int) -> np.ndarray:
    return np.asarray(skewnorm.rvs(a=shape, size=size, random_state=rng), dtype=float)


def _tail_exponential_rejection(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Standard normal truncated to (a, inf) for large a, translated-exponential proposal.
    rate = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty_like(a)
    pending = np.arange(a.size)
    while pending.size:
        z = a[pending] + rng.exponential(1.0 / rate[pending])
        accept = rng.random(pending.size) <= np.exp(-0.5 * (z - rate[pending]) ** 2)
        out[pending[accept]] = z[accept]
        pending = pending[~accept]
    return out


def trunc_normal_sample(mean, sd, lower, rng: np.random.Generator):
    """
    Draw from N(mean, sd^2) restricted to values strictly above `lower`.

    Accepts scalars or broadcastable arrays. The body uses the inverse CDF of the
    upper tail; standardized bounds beyond TAIL_SWITCH use exponential rejection.
    """
    scalar = np.ndim(mean) == 0 and np.ndim(sd) == 0 and np.ndim(lower) == 0
    mean, sd, lower = np.broadcast_arrays(
        np.asarray(mean, dtype=float), np.asarray(sd, dtype=float), np.asarray(lower, dtype=float)
    )
    mean, sd, lower = mean.ravel(), sd.ravel(), lower.ravel()
    if np.any(sd <= 0):
        raise ValueError("sd must be > 0")

    a = (lower - mean) / sd
    z = np.empty_like(a)
    tail = a > TAIL_SWITCH
    body = ~tail
    if np.any(body):
        u = rng.uniform(np.finfo(float).tiny, 1.0, size=int(body.sum()))
        z[body] = -ndtri(u * ndtr(-a[body]))
    if np.any(tail):
        z[tail] = _tail_exponential_rejection(a[tail], rng)

    draws = np.maximum(mean + sd * z, np.nextafter(lower, np.inf))
    return float(draws[0]) if scalar else draws
