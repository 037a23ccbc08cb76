from __future__ import annotations

import numpy as np
import pytest
from scipy import integrate, stats

from BACKEND.distributions import (
    MvnParams,
    NiwParams,
    mvn_condition,
    mvn_logpdf,
    mvn_sample,
    niw_marginal_logpdf,
    niw_posterior,
    niw_sample,
    niw_sample_batch,
    precision_factors,
    trunc_normal_sample,
)
from BACKEND.kernels import normal_loglik

COV3 = np.array([[2.0, 0.6, 0.3], [0.6, 1.0, -0.2], [0.3, -0.2, 1.5]])
MEAN3 = np.array([0.5, -1.0, 2.0])


def test_mvn_logpdf_matches_scipy():
    x = np.array([0.1, 0.2, 1.7])
    expected = stats.multivariate_normal(MEAN3, COV3).logpdf(x)
    assert mvn_logpdf(x, MvnParams(MEAN3, COV3)) == pytest.approx(expected, abs=1e-10)


def test_compiled_kernel_agrees_with_single_kernel():
    covs = np.stack([COV3, 2.0 * np.eye(3)])
    means = np.stack([MEAN3, np.zeros(3)])
    factors, half_log_dets = precision_factors(covs)
    x = np.array([1.0, 0.0, -1.0])
    for c in range(2):
        expected = mvn_logpdf(x, MvnParams(means[c], covs[c]))
        assert normal_loglik(x, means[c], factors[c], half_log_dets[c]) == pytest.approx(expected, abs=1e-10)


def test_precision_factors_invert_covariance():
    factors, half_log_dets = precision_factors(COV3[None])
    np.testing.assert_allclose(factors[0] @ factors[0].T, np.linalg.inv(COV3), atol=1e-12)
    assert half_log_dets[0] == pytest.approx(0.5 * np.linalg.slogdet(COV3)[1])


def test_asymmetric_covariance_rejected():
    with pytest.raises(ValueError):
        MvnParams(np.zeros(2), np.array([[1.0, 0.2], [0.1, 1.0]]))


def test_condition_matches_density_ratio():
    params = MvnParams(MEAN3, COV3)
    observed = np.array([2])
    z = 1.2
    cond = mvn_condition(params, observed, [z])
    x_free = np.array([0.3, -0.4])
    joint = mvn_logpdf(np.array([*x_free, z]), params)
    marginal = stats.norm(MEAN3[2], np.sqrt(COV3[2, 2])).logpdf(z)
    assert mvn_logpdf(x_free, cond) == pytest.approx(joint - marginal, abs=1e-6)


def test_condition_with_nothing_observed_is_identity():
    params = MvnParams(MEAN3, COV3)
    assert mvn_condition(params, [], []) is params


def test_condition_on_everything_rejected():
    with pytest.raises(ValueError):
        mvn_condition(MvnParams(MEAN3, COV3), [0, 1, 2], MEAN3)


def test_independent_block_ignores_condition_value():
    cov = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, 0.0], [0.0, 0.0, 4.0]])
    params = MvnParams(np.array([1.0, 2.0, 3.0]), cov)
    for z in (-5.0, 0.0, 10.0):
        cond = mvn_condition(params, [2], [z])
        np.testing.assert_allclose(cond.mean, [1.0, 2.0])
        np.testing.assert_allclose(cond.cov, cov[:2, :2])


def test_niw_posterior_single_observation():
    prior = NiwParams(np.array([1.0, -1.0]), kappa=0.25, dof=4.0, scale_matrix=np.eye(2))
    x = np.array([3.0, 5.0])
    post = niw_posterior(prior, x[None, :])
    np.testing.assert_allclose(post.location, (0.25 * prior.location + x) / 1.25)
    assert post.kappa == pytest.approx(1.25)
    assert post.dof == pytest.approx(5.0)


def test_niw_posterior_without_data_is_prior():
    prior = NiwParams(np.zeros(2), kappa=1.0, dof=3.0, scale_matrix=np.eye(2))
    assert niw_posterior(prior, np.empty((0, 2))) is prior


def test_niw_marginal_matches_quadrature_in_one_dimension():
    m, kappa, dof, psi = 0.4, 0.5, 3.0, 2.0
    prior = NiwParams(np.array([m]), kappa=kappa, dof=dof, scale_matrix=np.array([[psi]]))
    x = 1.3

    # Integrate phi analytically, then the variance numerically against its inverse-gamma prior.
    def integrand(s2):
        return (stats.norm(m, np.sqrt(s2 * (1.0 + 1.0 / kappa))).pdf(x)
                * stats.invgamma(a=dof / 2.0, scale=psi / 2.0).pdf(s2))

    value, _ = integrate.quad(integrand, 0.0, np.inf, limit=200)
    assert niw_marginal_logpdf([x], prior) == pytest.approx(np.log(value), abs=1e-3)


def test_niw_sample_is_symmetric_positive_definite(rng):
    prior = NiwParams(np.zeros(3), kappa=1.0 / 64, dof=3.0, scale_matrix=np.diag([2.0, 1.0, 0.5]))
    for _ in range(20):
        phi, sigma = niw_sample(prior, rng)
        assert phi.shape == (3,)
        np.testing.assert_allclose(sigma, sigma.T)
        assert np.all(np.linalg.eigvalsh(sigma) > 0)


@pytest.mark.parametrize("lower", [-1.0, 0.5, 6.0, 40.0])
def test_trunc_normal_stays_above_bound(rng, lower):
    draws = trunc_normal_sample(np.zeros(5000), 1.0, lower, rng)
    assert np.all(draws > lower)


def test_trunc_normal_scalar_in_scalar_out(rng):
    draw = trunc_normal_sample(0.0, 2.0, 1.0, rng)
    assert isinstance(draw, float)
    assert draw > 1.0


def test_trunc_normal_mean_matches_scipy(rng):
    mean, sd, lower = 1.0, 2.0, 2.5
    draws = trunc_normal_sample(np.full(40000, mean), sd, lower, rng)
    expected = stats.truncnorm((lower - mean) / sd, np.inf, loc=mean, scale=sd).mean()
    assert draws.mean() == pytest.approx(expected, abs=0.03)


def test_trunc_normal_rejects_nonpositive_sd(rng):
    with pytest.raises(ValueError):
        trunc_normal_sample(0.0, 0.0, 1.0, rng)


def test_mvn_sample_moments(rng):
    params = MvnParams(MEAN3, COV3)
    draws = np.array([mvn_sample(params, rng) for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(axis=0), MEAN3, atol=0.05)
    np.testing.assert_allclose(np.cov(draws.T), COV3, atol=0.08)


def test_sequential_conditioning_equals_joint_conditioning():
    cov = np.array([[2.0, 0.6, 0.3, 0.1], [0.6, 1.2, -0.2, 0.2], [0.3, -0.2, 1.5, 0.4], [0.1, 0.2, 0.4, 1.2]])
    params = MvnParams(np.array([0.5, -1.0, 2.0, 0.0]), cov)
    two_step = mvn_condition(mvn_condition(params, [3], [0.7]), [2], [-0.4])
    joint = mvn_condition(params, [2, 3], [-0.4, 0.7])
    np.testing.assert_allclose(two_step.mean, joint.mean, atol=1e-10)
    np.testing.assert_allclose(two_step.cov, joint.cov, atol=1e-10)


def test_niw_posterior_ignores_row_order():
    prior = NiwParams(np.array([1.0, -1.0]), kappa=0.25, dof=4.0, scale_matrix=np.eye(2))
    data = np.random.default_rng(3).normal(size=(9, 2))
    a = niw_posterior(prior, data)
    b = niw_posterior(prior, data[::-1])
    np.testing.assert_allclose(a.location, b.location, atol=1e-10)
    np.testing.assert_allclose(a.scale_matrix, b.scale_matrix, atol=1e-10)


def test_niw_posterior_is_sequentially_conjugate():
    prior = NiwParams(np.array([1.0, -1.0]), kappa=0.25, dof=4.0, scale_matrix=np.eye(2))
    data = np.random.default_rng(4).normal(size=(10, 2))
    staged = niw_posterior(niw_posterior(prior, data[:4]), data[4:])
    joint = niw_posterior(prior, data)
    np.testing.assert_allclose(staged.location, joint.location, atol=1e-10)
    np.testing.assert_allclose(staged.scale_matrix, joint.scale_matrix, atol=1e-10)
    assert staged.kappa == pytest.approx(joint.kappa)
    assert staged.dof == pytest.approx(joint.dof)


def test_niw_posterior_matches_grid_integration_in_one_dimension():
    prior = NiwParams(np.array([0.0]), kappa=1.0, dof=3.0, scale_matrix=np.array([[1.0]]))
    post = niw_posterior(prior, np.array([[2.0]]))

    # Prior x likelihood on a (phi, log variance) grid.
    phi = np.linspace(-30.0, 32.0, 2481)[:, None]
    log_s = np.linspace(-5.0, 9.0, 1401)[None, :]
    s = np.exp(log_s)
    log_w = (stats.invgamma.logpdf(s, a=1.5, scale=0.5) + log_s
             + stats.norm.logpdf(phi, 0.0, np.sqrt(s)) + stats.norm.logpdf(2.0, phi, np.sqrt(s)))
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    mean_phi = float((w * phi).sum())
    var_phi = float((w * (phi - mean_phi) ** 2).sum())
    mean_precision = float((w / s).sum())

    psi = post.scale_matrix[0, 0]
    assert mean_phi == pytest.approx(post.location[0], abs=1e-3)
    assert mean_precision == pytest.approx(post.dof / psi, abs=1e-3)
    assert var_phi == pytest.approx(psi / (post.kappa * (post.dof - 2.0)), abs=5e-3)


def test_niw_batch_moments(rng):
    psi = np.array([[2.0, 0.4, 0.0], [0.4, 1.0, 0.2], [0.0, 0.2, 0.5]])
    prior = NiwParams(np.array([1.0, 0.0, -1.0]), kappa=0.5, dof=12.0, scale_matrix=psi)
    draws = niw_sample_batch(prior, rng, size=20000)
    expected = psi / (prior.dof - 3 - 1)
    np.testing.assert_allclose(draws.sigmas.mean(axis=0), expected, rtol=0.03, atol=0.005)
    np.testing.assert_allclose(draws.phis.mean(axis=0), prior.location, atol=0.02)
    np.testing.assert_allclose(np.cov(draws.phis.T), expected / prior.kappa, rtol=0.05, atol=0.01)
    for s, f in zip(draws.sigmas[:5], draws.factors[:5]):
        np.testing.assert_allclose(f @ f.T @ s, np.eye(3), atol=1e-10)


def test_niw_batch_takes_one_draw_per_parameter_set(rng):
    rows = [NiwParams(np.full(2, c), kappa=1e8, dof=5.0, scale_matrix=np.eye(2)) for c in (-5.0, 0.0, 5.0)]
    draws = niw_sample_batch(rows, rng)
    assert draws.phis.shape == (3, 2)
    np.testing.assert_allclose(draws.phis[:, 0], [-5.0, 0.0, 5.0], atol=1e-2)
    with pytest.raises(ValueError):
        niw_sample_batch([], rng)


def test_mvn_sample_is_seed_deterministic():
    params = MvnParams(MEAN3, COV3)
    a = mvn_sample(params, np.random.default_rng(9))
    b = mvn_sample(params, np.random.default_rng(9))
    c = mvn_sample(params, np.random.default_rng(10))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
