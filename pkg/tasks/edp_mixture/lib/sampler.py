"""Gibbs sampler for the enriched Dirichlet process mixture of linear mixed models.

One sweep reassigns every subject to a (θ-cluster, ψ-subcluster) pair using
m auxiliary atoms per option, refreshes the cluster atoms from their conjugate
posteriors, then the random intercepts, their variance and the two
concentration parameters. ``DP`` mode collapses the nesting to one level,
``SINGLE`` mode fits one linear mixed model.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import betaln, logsumexp

from tasks.edp_mixture.lib import conjugate, predict
from tasks.edp_mixture.lib.core_types import (ChainState, NestedPartition, SamplerMode, augment_covariates,
                                              regression_dim)
from tasks.edp_mixture.lib.errors import DataError
from tasks.edp_mixture.lib.splines import SplineKind

log = logging.getLogger(__name__)


@dataclass
class TraceRecord:
    iteration: int
    n_theta_clusters: int
    n_psi_clusters_total: int
    alpha_theta: float
    alpha_psi: float
    sigma2_u: float
    log_likelihood: float
    partition: np.ndarray


@dataclass
class ChainResult:
    traces: list
    imputations: object
    state: ChainState
    alpha_psi_acceptance: float
    runtime_seconds: float


class ModelDesign:
    """Per-observation design rows for a dataset, frozen against one spline basis."""

    def __init__(self, dataset, spline_spec):
        self.dataset = dataset
        self.spline_spec = spline_spec
        self.include_time = spline_spec.kind is SplineKind.NONE
        self.p1 = dataset.schema.p1
        self.d_beta = regression_dim(dataset.schema, self.include_time)
        self.k_eta = spline_spec.dim
        self.covariates = dataset.covariate_matrix()
        self.n_obs = np.array([s.n_obs for s in dataset.subjects], dtype=np.int64)

        self.x_rows = []
        self.z_rows = []
        for subject in dataset.subjects:
            self.x_rows.append(augment_covariates(subject.x, subject.t, self.include_time))
            self.z_rows.append(spline_spec.basis(subject.t))
        if dataset.N:
            self.X = np.vstack(self.x_rows)
            self.Z = np.vstack(self.z_rows)
            self.y = np.concatenate([s.y for s in dataset.subjects])
        else:
            self.X = np.zeros((0, self.d_beta))
            self.Z = np.zeros((0, self.k_eta))
            self.y = np.zeros(0)
        self.obs_subject = np.repeat(np.arange(dataset.n), self.n_obs)

    def rows_at(self, x, times):
        return augment_covariates(x, times, self.include_time), self.spline_spec.basis(times)


def log_likelihood_y(subject, theta, u_i, basis_rows, include_time=False):
    """Σ_v log N(y_v; x*ᵀβ + z_vᵀη + u_i, σ²); zero for a subject without outcomes."""
    if subject.n_obs == 0:
        return 0.0
    x_star = augment_covariates(subject.x, subject.t, include_time)
    mean = x_star @ theta.beta + np.asarray(basis_rows).reshape(subject.n_obs, -1) @ theta.eta + u_i
    return float(conjugate.log_normal_density(subject.y, mean, theta.sigma2).sum())


def _loglik_many(X_i, Z_i, y_i, u_i, thetas):
    """Log-likelihood of one subject's outcomes under each of a stack of θ atoms."""
    sigma2 = np.asarray(thetas.sigma2, dtype=float)
    if y_i.size == 0:
        return np.zeros(sigma2.shape)
    mean = thetas.beta @ X_i.T + thetas.eta @ Z_i.T + u_i
    resid = y_i - mean
    return (-0.5 * y_i.size * (conjugate.LOG_2PI + np.log(sigma2))
            - 0.5 * (resid ** 2).sum(axis=-1) / sigma2)


def edp_log_weights(theta_counts, psi_counts, alpha_theta, alpha_psi, n, m_aux,
                    loglik_theta, logf_psi, logf_aux_psi, loglik_aux_theta, logf_aux_pair):
    """Unnormalised log-probabilities of every placement open to one removed subject.

    ``theta_counts[k]`` and ``psi_counts[k][j]`` exclude the subject; ``n`` counts it.
    Returns the flat log-weight vector and a parallel list of options:
    ``('psi', k, j)`` existing pair, ``('new_psi', k, s)`` auxiliary ψ slot s inside
    θ-cluster k, ``('new_pair', s)`` auxiliary (θ, ψ) slot s.
    """
    log_denominator = np.log(alpha_theta + n - 1.0)
    weights = []
    options = []
    for k, n_k in enumerate(theta_counts):
        base = np.log(n_k) - np.log(n_k + alpha_psi) - log_denominator + loglik_theta[k]
        for j, n_jk in enumerate(psi_counts[k]):
            weights.append(base + np.log(n_jk) + logf_psi[k][j])
            options.append(('psi', k, j))
        for s in range(m_aux):
            weights.append(base + np.log(alpha_psi / m_aux) + logf_aux_psi[k][s])
            options.append(('new_psi', k, s))
    for s in range(m_aux):
        weights.append(np.log(alpha_theta / m_aux) - log_denominator + loglik_aux_theta[s] + logf_aux_pair[s])
        options.append(('new_pair', s))
    return np.array(weights, dtype=float), options


def dp_log_weights(theta_counts, alpha, n, m_aux, loglik_theta, logf_psi, loglik_aux_theta, logf_aux_pair):
    """Single-level analogue of ``edp_log_weights``; existing options are ``('psi', k, 0)``."""
    log_denominator = np.log(alpha + n - 1.0)
    weights = []
    options = []
    for k, n_k in enumerate(theta_counts):
        weights.append(np.log(n_k) - log_denominator + loglik_theta[k] + logf_psi[k])
        options.append(('psi', k, 0))
    for s in range(m_aux):
        weights.append(np.log(alpha / m_aux) - log_denominator + loglik_aux_theta[s] + logf_aux_pair[s])
        options.append(('new_pair', s))
    return np.array(weights, dtype=float), options


def normalize_log_weights(log_weights):
    return np.exp(log_weights - logsumexp(log_weights))


def draw_categorical(probs, rng):
    cumulative = np.cumsum(probs)
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side='right'))
    return min(index, len(probs) - 1)


def alpha_theta_odds(n_theta, n, gamma, a_theta, b_theta, legacy_updates=False):
    """Mixing odds π/(1-π) for the two-Gamma α_θ posterior given the auxiliary γ."""
    if legacy_updates:
        return n_theta / (n * (1.0 - np.log(gamma)))
    return (a_theta + n_theta - 1.0) / (n * (b_theta - np.log(gamma)))


def log_alpha_psi_target(alpha, theta_sizes, a_psi, b_psi):
    """log[dGamma(α; a_ψ, b_ψ)·α^{n_θ}·Π_j (α + n_j)·B(α + 1, n_j)]."""
    theta_sizes = np.asarray(theta_sizes, dtype=float)
    return (stats.gamma.logpdf(alpha, a_psi, scale=1.0 / b_psi) + theta_sizes.size * np.log(alpha)
            + np.sum(np.log(alpha + theta_sizes) + betaln(alpha + 1.0, theta_sizes)))


class GibbsSampler:
    """Runs one chain. All randomness flows from ``config.seed``: the first spawned
    stream drives the chain, the second the predictive draws."""

    def __init__(self, dataset, spline_spec, priors, config):
        if dataset.n == 0:
            raise DataError('EMPTY_DATASET', 'cannot fit a dataset without subjects')
        self.priors = priors
        self.config = config
        self.spline_spec = spline_spec
        self.rebind(dataset)
        chain_seed, predict_seed = np.random.SeedSequence(config.seed).spawn(2)
        self.rng = np.random.default_rng(chain_seed)
        self.predict_rng = np.random.default_rng(predict_seed)
        self.alpha_psi_proposed = 0
        self.alpha_psi_accepted = 0

    def rebind(self, dataset):
        """Point the sampler at new data over the same subjects, keeping the basis."""
        self.dataset = dataset
        self.design = ModelDesign(dataset, self.spline_spec)
        self.beta0 = self.priors.beta0_vector(self.design.d_beta)

    @property
    def mode(self):
        return self.config.mode

    def _draw_theta(self, size=None):
        return conjugate.draw_theta_prior(self.priors, self.design.d_beta, self.design.k_eta, self.rng, size=size)

    def _draw_psi(self, shape=()):
        schema = self.dataset.schema
        return conjugate.draw_psi_prior(self.priors, schema.p1, schema.p2, self.rng, shape=shape)

    def initialize(self):
        n = self.dataset.n
        n_clusters = 1 if self.mode is SamplerMode.SINGLE else min(self.config.n_init_clusters, n)
        labels = self.rng.integers(n_clusters, size=n)
        partition = NestedPartition.from_labels(labels)
        theta_atoms = {k: self._draw_theta() for k in partition.theta_keys()}
        psi_atoms = {(k, 0): self._draw_psi() for k in partition.theta_keys()}
        priors = self.priors
        state = ChainState(partition=partition, theta_atoms=theta_atoms, psi_atoms=psi_atoms, u=np.zeros(n),
                           sigma2_u=priors.b_u / (priors.a_u + 1.0),
                           alpha_theta=priors.a_theta / priors.b_theta, alpha_psi=priors.a_psi / priors.b_psi,
                           rng=self.rng)
        state.relabel()
        self.within_cluster_update(state)
        log.info('initialised chain with %s theta-clusters over %s subjects (%s observations)',
                 len(state.partition.n_theta), n, self.dataset.N)
        return state

    def _subject_terms(self, i, u_i):
        return self.design.x_rows[i], self.design.z_rows[i], self.dataset.subjects[i].y, u_i

    def assignment_step(self, state):
        """Nested reassignment of every subject; emptied clusters are dropped and labels compacted."""
        if self.mode is SamplerMode.DP:
            return self.dp_assignment_step(state)
        partition = state.partition
        m = self.config.m_aux
        n = partition.n
        p1 = self.design.p1
        order = self.rng.permutation(n) if self.config.shuffle else range(n)
        for i in order:
            i = int(i)
            k_old, j_old, theta_gone, psi_gone = partition.remove(i)
            reused_theta = reused_pair_psi = reused_psi = None
            if theta_gone:
                reused_theta = state.theta_atoms.pop(k_old)
                reused_pair_psi = state.psi_atoms.pop((k_old, j_old))
            elif psi_gone:
                reused_psi = state.psi_atoms.pop((k_old, j_old))

            keys = partition.theta_keys()
            inner_keys = [partition.psi_keys(k) for k in keys]
            x_i = self.design.covariates[i]
            X_i, Z_i, y_i, u_i = self._subject_terms(i, state.u[i])

            aux_theta = self._draw_theta(size=m)
            aux_pair_psi = self._draw_psi(shape=(m,))
            aux_psi = self._draw_psi(shape=(len(keys), m))
            if theta_gone:
                _overwrite_theta(aux_theta, 0, reused_theta)
                _overwrite_psi(aux_pair_psi, (0,), reused_pair_psi)
            if psi_gone and not theta_gone:
                _overwrite_psi(aux_psi, (keys.index(k_old), 0), reused_psi)

            if keys:
                loglik_theta = _loglik_many(X_i, Z_i, y_i, u_i,
                                            conjugate.stack_theta([state.theta_atoms[k] for k in keys]))
                logf_psi = [conjugate.log_covariate_density(
                    x_i, conjugate.stack_psi([state.psi_atoms[(k, j)] for j in inner]), p1)
                    for k, inner in zip(keys, inner_keys)]
                logf_aux_psi = conjugate.log_covariate_density(x_i, aux_psi, p1)
            else:
                loglik_theta, logf_psi, logf_aux_psi = np.zeros(0), [], np.zeros((0, m))
            loglik_aux_theta = _loglik_many(X_i, Z_i, y_i, u_i, aux_theta)
            logf_aux_pair = conjugate.log_covariate_density(x_i, aux_pair_psi, p1)

            log_weights, options = edp_log_weights(
                [partition.n_theta[k] for k in keys],
                [[partition.n_psi[k][j] for j in inner] for k, inner in zip(keys, inner_keys)],
                state.alpha_theta, state.alpha_psi, n, m,
                loglik_theta, logf_psi, logf_aux_psi, loglik_aux_theta, logf_aux_pair)
            choice = options[draw_categorical(normalize_log_weights(log_weights), self.rng)]

            if choice[0] == 'psi':
                partition.add(i, keys[choice[1]], inner_keys[choice[1]][choice[2]])
            elif choice[0] == 'new_psi':
                k = keys[choice[1]]
                j = partition.new_psi_key(k)
                state.psi_atoms[(k, j)] = conjugate.psi_at(aux_psi, (choice[1], choice[2]))
                partition.add(i, k, j)
            else:
                k = partition.new_theta_key()
                state.theta_atoms[k] = conjugate.theta_at(aux_theta, choice[1])
                state.psi_atoms[(k, 0)] = conjugate.psi_at(aux_pair_psi, choice[1])
                partition.add(i, k, 0)
        state.relabel()
        return state

    def dp_assignment_step(self, state):
        """Single-level reassignment with joint (θ, ψ) atoms keyed (k, 0)."""
        partition = state.partition
        m = self.config.m_aux
        n = partition.n
        p1 = self.design.p1
        order = self.rng.permutation(n) if self.config.shuffle else range(n)
        for i in order:
            i = int(i)
            k_old, _, theta_gone, _ = partition.remove(i)
            aux_theta = self._draw_theta(size=m)
            aux_psi = self._draw_psi(shape=(m,))
            if theta_gone:
                _overwrite_theta(aux_theta, 0, state.theta_atoms.pop(k_old))
                _overwrite_psi(aux_psi, (0,), state.psi_atoms.pop((k_old, 0)))

            keys = partition.theta_keys()
            x_i = self.design.covariates[i]
            X_i, Z_i, y_i, u_i = self._subject_terms(i, state.u[i])
            if keys:
                loglik_theta = _loglik_many(X_i, Z_i, y_i, u_i,
                                            conjugate.stack_theta([state.theta_atoms[k] for k in keys]))
                logf_psi = conjugate.log_covariate_density(
                    x_i, conjugate.stack_psi([state.psi_atoms[(k, 0)] for k in keys]), p1)
            else:
                loglik_theta, logf_psi = np.zeros(0), np.zeros(0)

            log_weights, options = dp_log_weights(
                [partition.n_theta[k] for k in keys], state.alpha_theta, n, m, loglik_theta, logf_psi,
                _loglik_many(X_i, Z_i, y_i, u_i, aux_theta),
                conjugate.log_covariate_density(x_i, aux_psi, p1))
            choice = options[draw_categorical(normalize_log_weights(log_weights), self.rng)]

            if choice[0] == 'psi':
                partition.add(i, keys[choice[1]], 0)
            else:
                k = partition.new_theta_key()
                state.theta_atoms[k] = conjugate.theta_at(aux_theta, choice[1])
                state.psi_atoms[(k, 0)] = conjugate.psi_at(aux_psi, choice[1])
                partition.add(i, k, 0)
        state.relabel()
        return state

    def within_cluster_update(self, state):
        """Conjugate refresh of every θ atom from its members' outcomes and every ψ atom from their covariates."""
        design = self.design
        priors = self.priors
        partition = state.partition
        schema = self.dataset.schema
        obs_labels = partition.s_y[design.obs_subject]
        u_obs = state.u[design.obs_subject]

        for k in partition.theta_keys():
            mask = obs_labels == k
            X, Z, y, u = design.X[mask], design.Z[mask], design.y[mask], u_obs[mask]
            theta = state.theta_atoms[k]

            prior_prec = np.eye(design.d_beta) / theta.sigma2_beta
            regression = conjugate.update_regression(y - Z @ theta.eta - u, X, self.beta0, prior_prec,
                                                     priors.a_y, priors.b_y, state.rng)
            sigma2_beta = conjugate.update_sigma2_beta(regression.beta, self.beta0, regression.sigma2,
                                                       priors.a_beta, priors.b_beta, state.rng)
            spline = conjugate.update_spline(y - X @ regression.beta - u, Z, regression.sigma2, theta.eta,
                                             priors.a_eta, priors.b_eta, state.rng)
            theta.beta = regression.beta
            theta.sigma2 = regression.sigma2
            theta.sigma2_beta = sigma2_beta
            theta.eta = spline.eta
            theta.sigma2_eta = spline.sigma2_eta

            for j in partition.psi_keys(k):
                members = design.covariates[(partition.s_y == k) & (partition.s_x == j)]
                psi = state.psi_atoms[(k, j)]
                psi.p = conjugate.update_bernoulli(members[:, :schema.p1], priors.a_x, priors.b_x, state.rng)
                psi.sigma2_mu, psi.mu = conjugate.update_normal_invchi2(
                    members[:, schema.p1:], priors.nu0, priors.tau0_sq, priors.mu0, priors.c0, state.rng)
        return state

    def _observation_fit(self, state):
        """Per-observation fixed+spline mean and per-subject residual variance under the current atoms."""
        keys = np.array(state.partition.theta_keys())
        atoms = conjugate.stack_theta([state.theta_atoms[k] for k in keys])
        subject_slot = np.searchsorted(keys, state.partition.s_y)
        obs_slot = subject_slot[self.design.obs_subject]
        mean = (np.einsum('ij,ij->i', self.design.X, atoms.beta[obs_slot])
                + np.einsum('ij,ij->i', self.design.Z, atoms.eta[obs_slot]))
        return mean, atoms.sigma2[subject_slot]

    def update_random_intercepts(self, state):
        design = self.design
        n = self.dataset.n
        fixed_mean, subject_sigma2 = self._observation_fit(state)
        resid_sum = np.bincount(design.obs_subject, weights=design.y - fixed_mean, minlength=n)
        denom = design.n_obs * state.sigma2_u + subject_sigma2
        var_new = state.sigma2_u * subject_sigma2 / denom
        mean_new = state.sigma2_u * resid_sum / denom
        state.u = mean_new + np.sqrt(var_new) * state.rng.standard_normal(n)
        return state.u

    def update_sigma2_u(self, state):
        n = state.u.size
        state.sigma2_u = float(conjugate.inv_gamma(self.priors.a_u + 0.5 * n,
                                                   self.priors.b_u + 0.5 * (state.u @ state.u), state.rng))
        return state.sigma2_u

    def update_alpha_theta(self, state):
        """Escobar–West auxiliary-variable draw of α_θ given the number of θ-clusters."""
        rng = state.rng
        priors = self.priors
        n = state.partition.n
        n_theta = len(state.partition.n_theta)
        compat = self.config.legacy_updates
        gamma = rng.beta(state.alpha_theta if compat else state.alpha_theta + 1.0, n)
        rate = priors.b_theta - np.log(gamma)
        odds = alpha_theta_odds(n_theta, n, gamma, priors.a_theta, priors.b_theta, compat)
        shape = priors.a_theta + n_theta
        if rng.random() >= odds / (1.0 + odds):
            shape -= 1.0
        state.alpha_theta = float(rng.gamma(shape, 1.0 / rate))
        return state.alpha_theta

    def update_alpha_psi(self, state):
        """Independence Metropolis–Hastings step for α_ψ with a Gamma(a0, b0) proposal."""
        rng = state.rng
        priors = self.priors
        a0 = self.config.proposal_a0 if self.config.proposal_a0 is not None else priors.a_psi
        b0 = self.config.proposal_b0 if self.config.proposal_b0 is not None else priors.b_psi
        sizes = [state.partition.n_theta[k] for k in state.partition.theta_keys()]

        current = state.alpha_psi
        proposal = float(rng.gamma(a0, 1.0 / b0))
        log_ratio = (log_alpha_psi_target(proposal, sizes, priors.a_psi, priors.b_psi)
                     - log_alpha_psi_target(current, sizes, priors.a_psi, priors.b_psi))
        if not self.config.legacy_updates:
            log_ratio += (stats.gamma.logpdf(current, a0, scale=1.0 / b0)
                          - stats.gamma.logpdf(proposal, a0, scale=1.0 / b0))
        self.alpha_psi_proposed += 1
        if np.log(rng.random()) < log_ratio:
            state.alpha_psi = proposal
            self.alpha_psi_accepted += 1
        return state.alpha_psi

    def log_likelihood(self, state):
        fixed_mean, subject_sigma2 = self._observation_fit(state)
        obs = self.design.obs_subject
        mean = fixed_mean + state.u[obs]
        return float(conjugate.log_normal_density(self.design.y, mean, subject_sigma2[obs]).sum())

    def sweep(self, state):
        if self.mode is not SamplerMode.SINGLE:
            self.assignment_step(state)
        self.within_cluster_update(state)
        self.update_random_intercepts(state)
        self.update_sigma2_u(state)
        if self.mode is not SamplerMode.SINGLE and not self.config.fixed_concentrations:
            self.update_alpha_theta(state)
            if self.mode is SamplerMode.EDP:
                self.update_alpha_psi(state)
        return state

    def trace_record(self, iteration, state):
        return TraceRecord(iteration=iteration, n_theta_clusters=len(state.partition.n_theta),
                           n_psi_clusters_total=state.partition.n_psi_total(), alpha_theta=state.alpha_theta,
                           alpha_psi=state.alpha_psi, sigma2_u=state.sigma2_u,
                           log_likelihood=self.log_likelihood(state), partition=state.partition.pairs().copy())

    @property
    def alpha_psi_acceptance(self):
        if not self.alpha_psi_proposed:
            return float('nan')
        return self.alpha_psi_accepted / self.alpha_psi_proposed

    def run(self, targets=None, state=None):
        """Run ``config.n_iter`` sweeps, keeping retained traces and scheduled imputations."""
        started = time.time()
        config = self.config
        if state is None:
            state = self.initialize()
        self.rng = state.rng
        schedule = set(config.prediction_schedule)
        imputations = predict.ImputationSet.empty(config.prediction_schedule, targets) if targets else None

        traces = []
        for iteration in range(1, config.n_iter + 1):
            self.sweep(state)
            if config.retained(iteration):
                traces.append(self.trace_record(iteration, state))
            if imputations is not None and iteration in schedule:
                imputations.add(iteration, predict.draw_imputations(
                    state, self.dataset, targets, self.spline_spec, self.priors, self.predict_rng,
                    mode=config.mode))
            if config.log_every and iteration % config.log_every == 0:
                log.info('ITERATION %s/%s n_theta=%s n_psi=%s alpha_theta=%.3f alpha_psi=%.3f sigma2_u=%.4f ll=%.2f',
                         iteration, config.n_iter, len(state.partition.n_theta), state.partition.n_psi_total(),
                         state.alpha_theta, state.alpha_psi, state.sigma2_u, self.log_likelihood(state))

        runtime = time.time() - started
        log.info('chain finished: %s iterations, %s retained traces, alpha_psi acceptance %.3f, %.1fs',
                 config.n_iter, len(traces), self.alpha_psi_acceptance, runtime)
        return ChainResult(traces=traces, imputations=imputations, state=state,
                           alpha_psi_acceptance=self.alpha_psi_acceptance, runtime_seconds=runtime)


def _overwrite_theta(batch, index, atom):
    batch.beta[index] = atom.beta
    batch.sigma2_beta[index] = atom.sigma2_beta
    batch.eta[index] = atom.eta
    batch.sigma2_eta[index] = atom.sigma2_eta
    batch.sigma2[index] = atom.sigma2


def _overwrite_psi(batch, index, atom):
    batch.p[index] = atom.p
    batch.mu[index] = atom.mu
    batch.sigma2_mu[index] = atom.sigma2_mu


def run_chain(dataset, spline_spec, priors, config, targets=None):
    """Fit one chain; returns a ``ChainResult`` with traces, imputations (when targets are given) and final state."""
    return GibbsSampler(dataset, spline_spec, priors, config).run(targets=targets)
