"""Synthetic longitudinal data with three trajectory clusters and nested covariate subclusters, and the
prediction-error study comparing EDP, DP and single-cluster fits on it."""

import concurrent.futures
import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import pandas as pd
from sklearn.metrics import adjusted_rand_score

from tasks.edp_mixture.lib import cluster_summary, predict
from tasks.edp_mixture.lib.core_types import (ColumnKind, CovariateSchema, LongitudinalDataset, SamplerConfig,
                                              Priors, SamplerMode, SubjectRecord, coerce_value,
                                              evenly_spaced_schedule, known_fields, validate_dataset)
from tasks.edp_mixture.lib.errors import ConfigError, DataError
from tasks.edp_mixture.lib.sampler import run_chain
from tasks.edp_mixture.lib.splines import SplineSpec

log = logging.getLogger(__name__)

N_BINARY = 3
N_COVARIATES = 20
EVALUATION_TIME = 0.75

# (theta, psi) -> (Bernoulli p for x1..x3, (mean, variance) for x4, x5, (mean, variance) shared by x6..x20)
PSI_TABLES = {
    (0, 0): ((0.5, 0.75, 0.2), ((0.0, 1.0), (np.sqrt(2.0), np.sqrt(2.0))), (0.0, 1.0)),
    (0, 1): ((0.3, 0.5, 0.5), ((0.5, 0.5), (1.0, 2.0)), (-0.5, 1.0)),
    (0, 2): ((0.5, 0.5, 0.8), ((0.5, 2.0), (0.0, 1.0)), (0.5, 1.0)),
    (1, 0): ((0.75, 0.5, 0.35), ((2.0, 1.0), (0.0, 1.0)), (-0.5, 1.0)),
    (1, 1): ((0.5, 0.5, 0.5), ((1.0, 2.0), (-1.0, 1.0)), (0.5, 1.0)),
    (2, 0): ((0.75, 0.1, 0.3), ((0.5, 1.5), (0.0, 1.0)), (0.5, 1.0)),
    (2, 1): ((0.5, 0.3, 0.5), ((-0.5, 1.0), (0.0, 0.5)), (-0.5, 1.0)),
    (2, 2): ((0.5, 0.7, 0.5), ((0.0, 2.0), (-1.0, 2.0)), (0.0, 1.0)),
}
PSI_PER_THETA = (3, 2, 3)


class Structure(Enum):
    CLUSTERED = 'CLUSTERED'
    SINGLE = 'SINGLE'


def covariate_schema():
    names = tuple('x{}'.format(i + 1) for i in range(N_COVARIATES))
    kinds = tuple(ColumnKind.BINARY if i < N_BINARY else ColumnKind.CONTINUOUS for i in range(N_COVARIATES))
    return CovariateSchema(names=names, kinds=kinds)


def mean_function(theta, t, x):
    """Noise-free mean of cluster ``theta`` (0-based) at times ``t`` for covariates ``x`` (x1 is x[0])."""
    t = np.asarray(t, dtype=float)
    if theta == 0:
        return 2.0 + 7.0 * t - 2.0 * x[0] - 0.5 + 2.0 * np.cos(x[3])
    if theta == 1:
        return 7.0 - 20.0 * (t - 0.4) ** 2 + 1.1 * x[1] - 0.8 * x[2] + 0.5 * x[3] ** 2
    if theta == 2:
        return 6.0 - 8.0 * (t - 0.75) ** 2 - 3.0 * x[0] - x[3] + x[4]
    raise ValueError('unknown theta-cluster {}'.format(theta))


@dataclass
class DgpConfig:
    n: int = 1000
    sigma2: float = 1.0
    sigma2_u: float = 0.15
    theta_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    psi_probs: tuple = ((1 / 3, 1 / 3, 1 / 3), (0.5, 0.5), (1 / 3, 1 / 3, 1 / 3))
    structure: Structure = Structure.CLUSTERED
    seed: int = 0
    max_obs: int = 5

    def __post_init__(self):
        self.n = coerce_value('n', self.n, int)
        self.sigma2 = coerce_value('sigma2', self.sigma2, float)
        self.sigma2_u = coerce_value('sigma2_u', self.sigma2_u, float)
        self.seed = coerce_value('seed', self.seed, int)
        self.max_obs = coerce_value('max_obs', self.max_obs, int)
        if not isinstance(self.structure, Structure):
            try:
                self.structure = Structure(str(self.structure).upper())
            except ValueError:
                raise ConfigError('CONFIG_INVALID', 'structure must be CLUSTERED or SINGLE', key='structure')
        if self.n < 1 or self.max_obs < 1:
            raise ConfigError('CONFIG_INVALID', 'n and max_obs must be positive', key='n')
        if self.sigma2 <= 0 or self.sigma2_u <= 0:
            raise ConfigError('CONFIG_INVALID', 'sigma2 and sigma2_u must be positive', key='sigma2')
        self.theta_probs = self._probabilities('theta_probs', self.theta_probs, len(PSI_PER_THETA))
        if len(self.psi_probs) != len(PSI_PER_THETA):
            raise ConfigError('CONFIG_INVALID', 'psi_probs needs one vector per theta-cluster', key='psi_probs')
        self.psi_probs = tuple(self._probabilities('psi_probs', probs, size)
                               for probs, size in zip(self.psi_probs, PSI_PER_THETA))

    @staticmethod
    def _probabilities(key, values, size):
        try:
            values = tuple(float(v) for v in values)
        except (TypeError, ValueError):
            raise ConfigError('CONFIG_INVALID', '{} must be a list of numbers'.format(key), key=key)
        if len(values) != size or min(values) < 0 or abs(sum(values) - 1.0) > 1e-9:
            raise ConfigError('CONFIG_INVALID', '{} must be {} non-negative values summing to 1'.format(key, size),
                              key=key)
        return values

    @classmethod
    def from_config(cls, config):
        return cls(**known_fields(cls, config))


@dataclass
class SimulatedTruth:
    subject_ids: list
    theta: np.ndarray
    psi: np.ndarray
    u: np.ndarray
    x: np.ndarray
    t_star: float = EVALUATION_TIME
    values: np.ndarray = field(default=None)

    def to_frame(self):
        return pd.DataFrame({'subject_id': self.subject_ids, 'theta_cluster': self.theta, 'psi_cluster': self.psi,
                             'u': self.u, 'true_value': self.values})


def true_value(truth, subject_index, t_star=EVALUATION_TIME):
    """μ_c(t*, x_i) + u_i without noise."""
    return float(mean_function(int(truth.theta[subject_index]), t_star, truth.x[subject_index])
                 + truth.u[subject_index])


def draw_covariates(theta, psi, rng):
    binary_p, (x4, x5), rest = PSI_TABLES[(theta, psi)]
    binary = (rng.random(N_BINARY) < np.asarray(binary_p)).astype(float)
    means = np.array([x4[0], x5[0]] + [rest[0]] * (N_COVARIATES - N_BINARY - 2))
    variances = np.array([x4[1], x5[1]] + [rest[1]] * (N_COVARIATES - N_BINARY - 2))
    return np.concatenate([binary, means + np.sqrt(variances) * rng.standard_normal(means.size)])


def generate_dataset(cfg):
    """Draw a dataset and its truth; the same config and seed always give the same data."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    n = cfg.n
    if cfg.structure is Structure.SINGLE:
        theta = np.zeros(n, dtype=np.int64)
        psi = np.zeros(n, dtype=np.int64)
    else:
        theta = rng.choice(len(PSI_PER_THETA), size=n, p=cfg.theta_probs)
        psi = np.array([rng.choice(PSI_PER_THETA[k], p=cfg.psi_probs[k]) for k in theta], dtype=np.int64)
    u = rng.normal(0.0, np.sqrt(cfg.sigma2_u), size=n)
    n_obs = rng.integers(1, cfg.max_obs + 1, size=n)

    subjects = []
    covariates = np.zeros((n, N_COVARIATES))
    for i in range(n):
        covariates[i] = draw_covariates(int(theta[i]), int(psi[i]), rng)
        t = np.sort(rng.random(n_obs[i]))
        mean = mean_function(int(theta[i]), t, covariates[i]) + u[i]
        y = mean + np.sqrt(cfg.sigma2) * rng.standard_normal(t.size)
        subjects.append(SubjectRecord(id='S{:05d}'.format(i + 1), x=covariates[i], t=t, y=y))

    dataset = validate_dataset(LongitudinalDataset(schema=covariate_schema(), subjects=subjects))
    truth = SimulatedTruth(subject_ids=dataset.subject_ids(), theta=theta, psi=psi, u=u, x=covariates)
    truth.values = np.array([true_value(truth, i) for i in range(n)])
    log.info('generated %s subjects (%s observations), structure=%s sigma2=%s sigma2_u=%s seed=%s',
             n, dataset.N, cfg.structure.value, cfg.sigma2, cfg.sigma2_u, cfg.seed)
    return dataset, truth


def l1_l2_errors(predictions, truths):
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.shape != truths.shape or predictions.size == 0:
        raise DataError('LENGTH_MISMATCH', 'need equally long non-empty prediction and truth vectors, got {} and {}'
                        .format(predictions.size, truths.size))
    diff = predictions - truths
    return float(np.mean(np.abs(diff))), float(np.mean(diff ** 2))


@dataclass
class StudyConfig:
    n: int = 200
    n_datasets: int = 2
    sigma2_values: tuple = (1.0, 4.0)
    sigma2_u_values: tuple = (0.15, 0.5)
    structure: str = 'CLUSTERED'
    methods: tuple = ('EDP', 'DP', 'SINGLE')
    n_iter: int = 1000
    n_burnin: int = 250
    n_predictions: int = 50
    m_aux: int = 3
    seed: int = 0
    max_workers: int = 4
    spline_kind: str = 'THIN_PLATE'
    n_knots: int = 20
    knot_placement: str = 'quantile'
    priors: Priors = None

    def __post_init__(self):
        if self.priors is None:
            self.priors = Priors()
        for name in ('n', 'n_datasets', 'n_iter', 'n_burnin', 'n_predictions', 'm_aux', 'seed', 'max_workers',
                     'n_knots'):
            setattr(self, name, coerce_value(name, getattr(self, name), int))
        self.sigma2_values = tuple(coerce_value('sigma2_values', v, float) for v in _as_list(self.sigma2_values))
        self.sigma2_u_values = tuple(coerce_value('sigma2_u_values', v, float)
                                     for v in _as_list(self.sigma2_u_values))
        self.methods = tuple(str(m).upper() for m in _as_list(self.methods))
        for method in self.methods:
            if method not in SamplerMode.__members__:
                raise ConfigError('CONFIG_INVALID', 'unknown method {!r}'.format(method), key='methods')
        if self.n_datasets < 1:
            raise ConfigError('CONFIG_INVALID', 'n_datasets must be >= 1', key='n_datasets')
        if self.max_workers < 1:
            raise ConfigError('CONFIG_INVALID', 'max_workers must be >= 1', key='max_workers')

    @classmethod
    def from_config(cls, config):
        return cls(priors=Priors.from_config(config), **known_fields(cls, config, exclude=('priors',)))

    def scenarios(self):
        return [DgpConfig(n=self.n, sigma2=s2, sigma2_u=su2, structure=self.structure)
                for s2 in self.sigma2_values for su2 in self.sigma2_u_values]


def _as_list(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(',') if v.strip()]
    if np.ndim(value) == 0:
        return [value]
    return list(value)


def scenario_name(cfg):
    return '{}_sigma2={:g}_sigma2u={:g}'.format(cfg.structure.value.lower(), cfg.sigma2, cfg.sigma2_u)


def fit_and_score(dataset, truth, method, study, seed):
    """Fit one method to one replicate and score its t* predictions against the truth."""
    spline_spec = SplineSpec.from_config({'spline_kind': study.spline_kind, 'n_knots': study.n_knots,
                                          'knot_placement': study.knot_placement}, dataset.all_times())
    sampler_config = SamplerConfig(
        n_iter=study.n_iter, n_burnin=study.n_burnin, m_aux=study.m_aux, mode=method, seed=seed, log_every=0,
        prediction_schedule=evenly_spaced_schedule(study.n_iter, study.n_burnin, study.n_predictions))
    targets = predict.build_targets(dataset, truth.t_star)
    result = run_chain(dataset, spline_spec, study.priors, sampler_config, targets=targets)
    point = result.imputations.point_predictions()
    predictions = np.array([point[(sid, truth.t_star)] for sid in truth.subject_ids])
    l1, l2 = l1_l2_errors(predictions, truth.values)

    ari = float('nan')
    n_theta = cluster_summary.posterior_num_clusters(result.traces)
    if method != 'SINGLE' and result.traces:
        labels = cluster_summary.summarize([t.partition for t in result.traces], result.traces)
        ari = float(adjusted_rand_score(truth.theta, labels))
    return {'l1': l1, 'l2': l2, 'n_theta_median': n_theta, 'ari': ari,
            'alpha_psi_acceptance': result.alpha_psi_acceptance}


def run_study(study, executor_workers=None):
    """Every scenario × replicate × method on a process pool; returns (summary table, replicate table).

    Seeds come from SeedSequence children, so results do not depend on the worker count.
    """
    root = np.random.SeedSequence(study.seed)
    scenarios = study.scenarios()
    jobs = {}
    for s_index, (scenario, scenario_seq) in enumerate(zip(scenarios, root.spawn(len(scenarios)))):
        for replicate, replicate_seq in enumerate(scenario_seq.spawn(study.n_datasets)):
            data_seed, fit_seed = (int(s.generate_state(1)[0]) for s in replicate_seq.spawn(2))
            jobs[(s_index, replicate)] = (replace(scenario, seed=data_seed), fit_seed)

    datasets = {key: generate_dataset(cfg) for key, (cfg, _) in jobs.items()}
    rows = []
    with concurrent.futures.ProcessPoolExecutor(max_workers=executor_workers or study.max_workers) as executor:
        futures = {}
        for key, (cfg, fit_seed) in jobs.items():
            dataset, truth = datasets[key]
            for method in study.methods:
                future = executor.submit(fit_and_score, dataset, truth, method, study, fit_seed)
                futures[future] = (key, method)
        for future in concurrent.futures.as_completed(futures):
            (s_index, replicate), method = futures[future]
            cfg, fit_seed = jobs[(s_index, replicate)]
            job_key = '{}/{}/{}'.format(scenario_name(cfg), replicate, method)
            try:
                scores = future.result()
                log.info('FUTURE_COMPLETE key=%s l1=%.4f l2=%.4f', job_key, scores['l1'], scores['l2'])
            except Exception as e:
                log.error('FUTURE_FAILED key=%s error=%s', job_key, e)
                log.exception(e)
                raise
            rows.append(dict(scenario=scenario_name(cfg), scenario_index=s_index, replicate=replicate,
                             method=method, data_seed=cfg.seed, fit_seed=fit_seed, **scores))

    replicates = pd.DataFrame(rows)
    method_order = {m: i for i, m in enumerate(study.methods)}
    replicates['method_index'] = replicates['method'].map(method_order)
    replicates = replicates.sort_values(['scenario_index', 'replicate', 'method_index']).reset_index(drop=True)

    summary = (replicates.groupby(['scenario_index', 'scenario', 'method_index', 'method'], sort=True)
               .agg(l1_mean=('l1', 'mean'), l2_mean=('l2', 'mean'), n_datasets=('replicate', 'count'))
               .reset_index())
    summary['n'] = study.n
    summary['seed'] = study.seed
    summary = summary[['scenario', 'method', 'l1_mean', 'l2_mean', 'n_datasets', 'n', 'seed']]
    return summary, replicates.drop(columns=['scenario_index', 'method_index'])
