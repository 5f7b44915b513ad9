"""Closed-form conjugate draws, prior draws and marginal likelihoods.

Every function that samples takes the ``numpy.random.Generator`` it should
draw from; nothing here keeps state.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import betaln, gammaln

from tasks.edp_mixture.lib.core_types import PsiParams, ThetaParams
from tasks.edp_mixture.lib.errors import NumericError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class RegressionDraw:
    sigma2: float
    beta: np.ndarray
    beta_n: np.ndarray
    shape: float
    rate: float


@dataclass
class SplineDraw:
    sigma2_eta: float
    eta: np.ndarray
    mean: np.ndarray


def _upper_cholesky(matrix):
    try:
        return linalg.cholesky(matrix, lower=False)
    except linalg.LinAlgError as e:
        raise NumericError('SINGULAR_DESIGN', 'posterior precision is not positive definite: {}'.format(e))


def inv_gamma(shape, rate, rng, size=None):
    return rate / rng.gamma(shape, size=size)


def scaled_inv_chi2(nu, s2, rng, size=None):
    """Scaled-Inv-χ²(ν, s²) drawn as ν·s² / χ²_ν."""
    return nu * s2 / rng.chisquare(nu, size=size)


def update_regression(y_star, X, beta0, prior_prec, a, b, rng):
    """Joint Normal–Inverse-Gamma draw of (σ², β) given residual outcomes.

    Σ_n = XᵀX + P, β_n = Σ_n⁻¹(Pβ0 + Xᵀy*),
    σ² ~ Inv-Ga(a + N/2, b + ½(y*ᵀy* + β0ᵀPβ0 - β_nᵀΣ_nβ_n))
    and β | σ² ~ N(β_n, σ²Σ_n⁻¹).
    """
    y_star = np.asarray(y_star, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    if X.ndim < 2:
        X = X.reshape(y_star.size, -1)
    beta0 = np.asarray(beta0, dtype=float).reshape(-1)
    prior_prec = np.atleast_2d(np.asarray(prior_prec, dtype=float))

    sigma_n = X.T @ X + prior_prec
    upper = _upper_cholesky(sigma_n)
    beta_n = linalg.cho_solve((upper, False), prior_prec @ beta0 + X.T @ y_star)

    shape = a + 0.5 * y_star.size
    quad = y_star @ y_star + beta0 @ prior_prec @ beta0 - beta_n @ sigma_n @ beta_n
    # the quadratic form is a sum of squares; rounding can push it slightly negative
    rate = b + 0.5 * max(quad, 0.0)

    sigma2 = float(inv_gamma(shape, rate, rng))
    z = rng.standard_normal(beta_n.size)
    beta = beta_n + np.sqrt(sigma2) * linalg.solve_triangular(upper, z, lower=False)
    return RegressionDraw(sigma2=sigma2, beta=beta, beta_n=beta_n, shape=shape, rate=rate)


def update_sigma2_beta(beta, beta0, sigma2, a_beta, b_beta, rng):
    diff = np.asarray(beta, dtype=float) - np.asarray(beta0, dtype=float)
    return float(inv_gamma(a_beta + 0.5 * diff.size, b_beta + 0.5 * (diff @ diff) / sigma2, rng))


def update_spline(y_star, Z, sigma2, eta, a_eta, b_eta, rng):
    """Draw σ²_η from the current η, then η ~ N(μ_n, Σ_bn⁻¹) with Σ_bn = ZᵀZ/σ² + I/σ²_η."""
    eta = np.asarray(eta, dtype=float).reshape(-1)
    k = eta.size
    if k == 0:
        return SplineDraw(sigma2_eta=float(inv_gamma(a_eta, b_eta, rng)), eta=eta.copy(), mean=eta.copy())
    y_star = np.asarray(y_star, dtype=float).reshape(-1)
    Z = np.asarray(Z, dtype=float).reshape(y_star.size, k)

    sigma2_eta = float(inv_gamma(a_eta + 0.5 * k, b_eta + 0.5 * (eta @ eta), rng))
    precision = Z.T @ Z / sigma2 + np.eye(k) / sigma2_eta
    upper = _upper_cholesky(precision)
    mean = linalg.cho_solve((upper, False), Z.T @ y_star / sigma2)
    draw = mean + linalg.solve_triangular(upper, rng.standard_normal(k), lower=False)
    return SplineDraw(sigma2_eta=sigma2_eta, eta=draw, mean=mean)


def update_bernoulli(x_values, a_x, b_x, rng):
    """p ~ Beta(Σx + a_x, n - Σx + b_x), one draw per column of ``x_values``."""
    x_values = np.asarray(x_values, dtype=float)
    if x_values.ndim == 1:
        x_values = x_values[:, None]
    n = x_values.shape[0]
    ones = x_values.sum(axis=0)
    return rng.beta(ones + a_x, n - ones + b_x)


def update_normal_invchi2(x_values, nu0, tau0_sq, mu0, c0, rng):
    """Normal–scaled-Inv-χ² posterior draw per column; returns (sigma2_mu, mu)."""
    x_values = np.asarray(x_values, dtype=float)
    if x_values.ndim == 1:
        x_values = x_values[:, None]
    n, cols = x_values.shape
    if n:
        xbar = x_values.mean(axis=0)
        ss = ((x_values - xbar) ** 2).sum(axis=0)
    else:
        xbar = np.zeros(cols)
        ss = np.zeros(cols)

    nu_n = nu0 + n
    s2_n = (nu0 * tau0_sq + ss + c0 * n / (c0 + n) * (xbar - mu0) ** 2) / nu_n
    sigma2_mu = scaled_inv_chi2(nu_n, s2_n, rng, size=cols)
    mu_n = (c0 * mu0 + n * xbar) / (c0 + n)
    mu = mu_n + np.sqrt(sigma2_mu / (c0 + n)) * rng.standard_normal(cols)
    return sigma2_mu, mu


def log_marginal_bernoulli(x, a, b):
    x = np.asarray(x, dtype=float)
    return betaln(a + x, b - x + 1.0) - betaln(a, b)


def marginal_bernoulli(x, a, b):
    return np.exp(log_marginal_bernoulli(x, a, b))


def log_marginal_normal_invchi2(x, mu0, c0, nu0, tau0):
    """Log prior predictive of one continuous value under the Normal–scaled-Inv-χ² prior.

    With c_n = c0 + 1, ν_n = ν0 + 1 and τ_n = (ν0τ0 + (c0/c_n)(μ0 - x)²)/ν_n:
    log h = -½log 2π + ½log(c0/c_n) + (ν0/2)log(τ0ν0/2) - (ν_n/2)log(τ_nν_n/2) + lnΓ(ν_n/2) - lnΓ(ν0/2),
    a Student-t with ν0 degrees of freedom, location μ0 and scale √(τ0(1 + 1/c0)).
    """
    x = np.asarray(x, dtype=float)
    c_n = c0 + 1.0
    nu_n = nu0 + 1.0
    tau_n = (nu0 * tau0 + (c0 / c_n) * (mu0 - x) ** 2) / nu_n
    return (-0.5 * LOG_2PI + 0.5 * np.log(c0 / c_n)
            + 0.5 * nu0 * np.log(tau0 * nu0 / 2.0) - 0.5 * nu_n * np.log(tau_n * nu_n / 2.0)
            + gammaln(nu_n / 2.0) - gammaln(nu0 / 2.0))


def marginal_normal_invchi2(x, mu0, c0, nu0, tau0):
    return np.exp(log_marginal_normal_invchi2(x, mu0, c0, nu0, tau0))


def log_prior_predictive_x0(x, p1, priors):
    """log f_{x,0}(x): binary factors first, continuous after, summed in log space."""
    x = np.asarray(x, dtype=float)
    binary = log_marginal_bernoulli(x[..., :p1], priors.a_x, priors.b_x).sum(axis=-1)
    continuous = log_marginal_normal_invchi2(x[..., p1:], priors.mu0, priors.c0, priors.nu0,
                                             priors.tau0_sq).sum(axis=-1)
    return binary + continuous


def prior_predictive_x0(x, p1, priors):
    return np.exp(log_prior_predictive_x0(x, p1, priors))


def log_covariate_density(x, psi, p1):
    """log Π Bern(x_b; p) · Π N(x_c; μ, σ²_μ) for one or many covariate rows."""
    x = np.asarray(x, dtype=float)
    xb = x[..., :p1]
    xc = x[..., p1:]
    with np.errstate(divide='ignore'):
        log_binary = np.where(xb == 1.0, np.log(psi.p), np.log1p(-psi.p)).sum(axis=-1)
    log_cont = (-0.5 * (LOG_2PI + np.log(psi.sigma2_mu)) - 0.5 * (xc - psi.mu) ** 2 / psi.sigma2_mu).sum(axis=-1)
    return log_binary + log_cont


def log_normal_density(y, mean, var):
    y = np.asarray(y, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (y - mean) ** 2 / var


def draw_theta_prior(priors, d_beta, k_eta, rng, size=None):
    """Draw θ from its base measure; with ``size`` every field gains a leading axis of that length.

    σ² ~ Inv-Ga(a_y, b_y), σ²_β ~ Inv-Ga(a_β, b_β), β ~ N(β0, σ²σ²_β I),
    σ²_η ~ Inv-Ga(a_η, b_η), η ~ N(0, σ²_η I).
    """
    shape = () if size is None else (size,)
    sigma2 = inv_gamma(priors.a_y, priors.b_y, rng, size=shape)
    sigma2_beta = inv_gamma(priors.a_beta, priors.b_beta, rng, size=shape)
    beta = priors.beta0_vector(d_beta) + np.sqrt(sigma2 * sigma2_beta)[..., None] * rng.standard_normal(
        shape + (d_beta,))
    sigma2_eta = inv_gamma(priors.a_eta, priors.b_eta, rng, size=shape)
    eta = np.sqrt(sigma2_eta)[..., None] * rng.standard_normal(shape + (k_eta,))
    if size is None:
        return ThetaParams(beta=beta, sigma2_beta=float(sigma2_beta), eta=eta, sigma2_eta=float(sigma2_eta),
                           sigma2=float(sigma2))
    return ThetaParams(beta=beta, sigma2_beta=sigma2_beta, eta=eta, sigma2_eta=sigma2_eta, sigma2=sigma2)


def draw_psi_prior(priors, p1, p2, rng, shape=()):
    """Draw ψ from its base measure; ``shape`` prepends batch axes to each field."""
    shape = tuple(shape)
    p = rng.beta(priors.a_x, priors.b_x, size=shape + (p1,))
    sigma2_mu = scaled_inv_chi2(priors.nu0, priors.tau0_sq, rng, size=shape + (p2,))
    mu = priors.mu0 + np.sqrt(sigma2_mu / priors.c0) * rng.standard_normal(shape + (p2,))
    return PsiParams(p=p, mu=mu, sigma2_mu=sigma2_mu)


def stack_theta(atoms):
    return ThetaParams(beta=np.stack([a.beta for a in atoms]),
                       sigma2_beta=np.array([a.sigma2_beta for a in atoms]),
                       eta=np.stack([a.eta for a in atoms]),
                       sigma2_eta=np.array([a.sigma2_eta for a in atoms]),
                       sigma2=np.array([a.sigma2 for a in atoms]))


def stack_psi(atoms):
    return PsiParams(p=np.stack([a.p for a in atoms]), mu=np.stack([a.mu for a in atoms]),
                     sigma2_mu=np.stack([a.sigma2_mu for a in atoms]))


def theta_at(batch, index):
    return ThetaParams(beta=batch.beta[index].copy(), sigma2_beta=float(batch.sigma2_beta[index]),
                       eta=batch.eta[index].copy(), sigma2_eta=float(batch.sigma2_eta[index]),
                       sigma2=float(batch.sigma2[index]))


def psi_at(batch, index):
    return PsiParams(p=batch.p[index].copy(), mu=batch.mu[index].copy(), sigma2_mu=batch.sigma2_mu[index].copy())
