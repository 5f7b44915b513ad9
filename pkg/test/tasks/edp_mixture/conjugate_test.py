import numpy as np
import pytest
from scipy import integrate, stats

from tasks.edp_mixture.lib import conjugate
from tasks.edp_mixture.lib.core_types import Priors, PsiParams
from tasks.edp_mixture.lib.errors import NumericError


def test_marginal_bernoulli():
    assert conjugate.marginal_bernoulli(1.0, 2.0, 3.0) == pytest.approx(0.4, rel=1e-12)
    assert conjugate.marginal_bernoulli(0.0, 2.0, 3.0) == pytest.approx(0.6, rel=1e-12)


@pytest.mark.parametrize('mu0, c0, nu0, tau0', [(0.0, 0.5, 2.0, 1.0), (1.5, 2.0, 5.0, 0.3)])
def test_marginal_normal_is_student_t(mu0, c0, nu0, tau0):
    x = np.linspace(-4.0, 6.0, 11)
    expected = stats.t.logpdf(x, df=nu0, loc=mu0, scale=np.sqrt(tau0 * (1.0 + 1.0 / c0)))
    assert np.allclose(conjugate.log_marginal_normal_invchi2(x, mu0, c0, nu0, tau0), expected, rtol=1e-6)
    total, _ = integrate.quad(lambda v: conjugate.marginal_normal_invchi2(v, mu0, c0, nu0, tau0), -np.inf, np.inf)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_prior_predictive_x0_factorises():
    priors = Priors(a_x=2.0, b_x=1.0)
    x = np.array([1.0, 0.0, 0.7])
    expected = (conjugate.log_marginal_bernoulli(1.0, 2.0, 1.0) + conjugate.log_marginal_bernoulli(0.0, 2.0, 1.0)
                + conjugate.log_marginal_normal_invchi2(0.7, priors.mu0, priors.c0, priors.nu0, priors.tau0_sq))
    assert conjugate.log_prior_predictive_x0(x, 2, priors) == pytest.approx(expected, rel=1e-12)


def test_log_covariate_density_matches_scipy():
    psi = PsiParams(p=np.array([0.3]), mu=np.array([1.0, -1.0]), sigma2_mu=np.array([0.5, 2.0]))
    x = np.array([1.0, 0.4, 0.0])
    expected = (np.log(0.3) + stats.norm.logpdf(0.4, 1.0, np.sqrt(0.5)) + stats.norm.logpdf(0.0, -1.0, np.sqrt(2.0)))
    assert conjugate.log_covariate_density(x, psi, 1) == pytest.approx(expected, rel=1e-12)


def test_log_covariate_density_broadcasts_over_atoms():
    batch = conjugate.stack_psi([PsiParams(p=np.array([p]), mu=np.array([0.0]), sigma2_mu=np.array([1.0]))
                                 for p in (0.2, 0.9)])
    values = conjugate.log_covariate_density(np.array([0.0, 0.0]), batch, 1)
    assert values.shape == (2,)
    assert values[0] - values[1] == pytest.approx(np.log(0.8) - np.log(0.1))


def test_update_regression_closed_form(rng):
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    y = np.array([0.9, 2.1, 2.9, 4.2, 5.1, 5.8])
    beta0 = np.array([0.5, 0.0])
    prec = np.eye(2) / 4.0
    draw = conjugate.update_regression(y, X, beta0, prec, 2.0, 1.0, rng)

    sigma_n = X.T @ X + prec
    beta_n = np.linalg.solve(sigma_n, prec @ beta0 + X.T @ y)
    rate = 1.0 + 0.5 * (y @ y + beta0 @ prec @ beta0 - beta_n @ sigma_n @ beta_n)
    assert np.allclose(draw.beta_n, beta_n)
    assert draw.shape == 5.0
    assert draw.rate == pytest.approx(rate)
    assert draw.sigma2 > 0 and draw.beta.shape == (2,)


def test_update_regression_moments(rng):
    X = np.column_stack([np.ones(10), np.linspace(0.0, 1.0, 10)])
    y = 1.0 + 2.0 * X[:, 1] + np.array([0.1, -0.2, 0.05, 0.3, -0.1, 0.0, 0.2, -0.3, 0.1, -0.05])
    draws = [conjugate.update_regression(y, X, np.zeros(2), np.eye(2) * 0.1, 3.0, 1.0, rng) for _ in range(20000)]
    shape, rate = draws[0].shape, draws[0].rate
    sigma2 = np.array([d.sigma2 for d in draws])
    mean, var = rate / (shape - 1.0), rate ** 2 / ((shape - 1.0) ** 2 * (shape - 2.0))
    assert abs(sigma2.mean() - mean) < 5 * np.sqrt(var / sigma2.size)

    beta = np.array([d.beta for d in draws])
    cov = mean * np.linalg.inv(X.T @ X + np.eye(2) * 0.1)
    se = np.sqrt(np.diag(cov) / beta.shape[0])
    assert np.all(np.abs(beta.mean(axis=0) - draws[0].beta_n) < 6 * se)


def test_update_regression_without_rows(rng):
    draw = conjugate.update_regression(np.zeros(0), np.zeros((0, 3)), np.zeros(3), np.eye(3), 2.0, 1.0, rng)
    assert np.allclose(draw.beta_n, 0.0)
    assert draw.shape == 2.0 and draw.rate == 1.0


def test_update_regression_singular_precision(rng):
    with pytest.raises(NumericError) as e:
        conjugate.update_regression(np.zeros(0), np.zeros((0, 2)), np.zeros(2), -np.eye(2), 2.0, 1.0, rng)
    assert e.value.code == 'SINGULAR_DESIGN'


def test_update_sigma2_beta_moments(rng):
    beta = np.array([1.0, -2.0, 0.5])
    draws = np.array([conjugate.update_sigma2_beta(beta, np.zeros(3), 2.0, 3.0, 4.0, rng) for _ in range(20000)])
    shape, rate = 3.0 + 1.5, 4.0 + 0.5 * (beta @ beta) / 2.0
    mean, var = rate / (shape - 1.0), rate ** 2 / ((shape - 1.0) ** 2 * (shape - 2.0))
    assert abs(draws.mean() - mean) < 5 * np.sqrt(var / draws.size)


def test_update_spline_posterior_mean(rng):
    Z = np.array([[1.0, 0.2], [0.4, 1.0], [0.3, 0.3], [0.0, 1.5]])
    y = np.array([1.0, 0.5, 0.2, -0.4])
    draw = conjugate.update_spline(y, Z, 0.5, np.array([0.3, -0.1]), 2.0, 1.0, rng)
    precision = Z.T @ Z / 0.5 + np.eye(2) / draw.sigma2_eta
    assert np.allclose(draw.mean, np.linalg.solve(precision, Z.T @ y / 0.5))
    assert draw.eta.shape == (2,)


def test_update_spline_without_basis(rng):
    draw = conjugate.update_spline(np.ones(3), np.zeros((3, 0)), 1.0, np.zeros(0), 2.0, 1.0, rng)
    assert draw.eta.size == 0 and draw.sigma2_eta > 0


def test_update_bernoulli_mean(rng):
    x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    draws = np.array([conjugate.update_bernoulli(x, 1.0, 1.0, rng) for _ in range(20000)])
    assert draws.shape == (20000, 2)
    expected = np.array([4.0 / 6.0, 2.0 / 6.0])
    se = np.sqrt(expected * (1 - expected) / 7.0 / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - expected) < 5 * se)


def test_update_normal_invchi2_moments(rng):
    x = np.array([0.5, 1.5, 1.0, 2.0, 0.0])
    nu0, tau0, mu0, c0 = 2.0, 1.0, 0.0, 0.5
    draws = [conjugate.update_normal_invchi2(x, nu0, tau0, mu0, c0, rng) for _ in range(20000)]
    sigma2 = np.array([d[0][0] for d in draws])
    mu = np.array([d[1][0] for d in draws])

    n, xbar = x.size, x.mean()
    nu_n = nu0 + n
    s2_n = (nu0 * tau0 + ((x - xbar) ** 2).sum() + c0 * n / (c0 + n) * (xbar - mu0) ** 2) / nu_n
    mean_sigma2 = nu_n * s2_n / (nu_n - 2.0)
    var_sigma2 = 2.0 * nu_n ** 2 * s2_n ** 2 / ((nu_n - 2.0) ** 2 * (nu_n - 4.0))
    assert abs(sigma2.mean() - mean_sigma2) < 5 * np.sqrt(var_sigma2 / sigma2.size)
    mu_n = (c0 * mu0 + n * xbar) / (c0 + n)
    assert abs(mu.mean() - mu_n) < 5 * np.sqrt(mean_sigma2 / (c0 + n) / mu.size)


def test_update_normal_invchi2_empty_cluster_draws_from_prior(rng):
    sigma2, mu = conjugate.update_normal_invchi2(np.zeros((0, 3)), 2.0, 1.0, 0.0, 0.5, rng)
    assert sigma2.shape == (3,) and mu.shape == (3,)
    assert np.all(sigma2 > 0)


def test_empty_clusters_recover_their_priors(rng):
    p = np.array([conjugate.update_bernoulli(np.zeros((0, 1)), 2.0, 3.0, rng)[0] for _ in range(4000)])
    assert stats.kstest(p, stats.beta(2.0, 3.0).cdf).pvalue > 1e-3

    draws = [conjugate.update_normal_invchi2(np.zeros((0, 1)), 4.0, 0.5, 1.0, 2.0, rng) for _ in range(4000)]
    sigma2 = np.array([d[0][0] for d in draws])
    mu = np.array([d[1][0] for d in draws])
    assert stats.kstest(sigma2, stats.invgamma(2.0, scale=1.0).cdf).pvalue > 1e-3
    assert stats.kstest(mu, stats.t(4.0, loc=1.0, scale=0.5).cdf).pvalue > 1e-3


def test_prior_draw_shapes(rng, priors):
    theta = conjugate.draw_theta_prior(priors, 4, 3, rng)
    assert theta.beta.shape == (4,) and theta.eta.shape == (3,)
    assert isinstance(theta.sigma2, float)
    batch = conjugate.draw_theta_prior(priors, 4, 3, rng, size=5)
    assert batch.beta.shape == (5, 4) and batch.sigma2.shape == (5,)
    assert conjugate.theta_at(batch, 2).beta.shape == (4,)

    psi = conjugate.draw_psi_prior(priors, 2, 3, rng, shape=(4, 2))
    assert psi.p.shape == (4, 2, 2) and psi.mu.shape == (4, 2, 3)
    assert np.all((psi.p > 0) & (psi.p < 1)) and np.all(psi.sigma2_mu > 0)
    assert conjugate.psi_at(psi, (1, 0)).mu.shape == (3,)
