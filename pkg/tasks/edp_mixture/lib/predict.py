"""Posterior-predictive draws, imputation sets, threshold outcomes and Rubin pooling."""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import logsumexp

from tasks.edp_mixture.lib import conjugate
from tasks.edp_mixture.lib.core_types import SamplerMode, augment_covariates
from tasks.edp_mixture.lib.errors import ConfigError, DataError
from tasks.edp_mixture.lib.splines import SplineKind

log = logging.getLogger(__name__)


class TargetMode(Enum):
    OBSERVED_SUBJECT = 'OBSERVED_SUBJECT'
    NEW_SUBJECT = 'NEW_SUBJECT'


@dataclass(frozen=True)
class PredictionTarget:
    subject_id: str
    target_time: float
    mode: TargetMode = TargetMode.OBSERVED_SUBJECT

    def __post_init__(self):
        if not np.isfinite(self.target_time):
            raise DataError('NON_FINITE', 'target time must be finite', subject_id=self.subject_id)


def build_targets(dataset, target_times):
    """One target per (subject, time); subjects without outcomes are routed to new-subject prediction.

    ``target_times`` is either one time for everyone or a mapping subject_id -> time.
    """
    targets = []
    for subject in dataset.subjects:
        if isinstance(target_times, dict):
            if subject.id not in target_times:
                continue
            t_star = target_times[subject.id]
        else:
            t_star = target_times
        mode = TargetMode.OBSERVED_SUBJECT if subject.n_obs else TargetMode.NEW_SUBJECT
        targets.append(PredictionTarget(subject_id=subject.id, target_time=float(t_star), mode=mode))
    if isinstance(target_times, dict):
        for sid in target_times:
            dataset.index_of(sid)
    return targets


@dataclass
class ImputationSet:
    schedule: tuple
    targets: tuple
    draws: dict

    @classmethod
    def empty(cls, schedule, targets):
        targets = tuple(targets)
        return cls(schedule=tuple(schedule), targets=targets,
                   draws={(t.subject_id, t.target_time): [] for t in targets})

    def add(self, iteration, values):
        if iteration not in self.schedule:
            raise ConfigError('SCHEDULE_OUT_OF_RANGE', 'iteration {} is not a scheduled imputation'.format(iteration))
        for target, value in zip(self.targets, values):
            self.draws[(target.subject_id, target.target_time)].append(float(value))

    def is_complete(self):
        return all(len(values) == len(self.schedule) for values in self.draws.values())

    def to_frame(self):
        rows = []
        for (subject_id, target_time), values in self.draws.items():
            for index, value in enumerate(values):
                rows.append((index, subject_id, target_time, value))
        frame = pd.DataFrame(rows, columns=['imputation_index', 'subject_id', 'target_time', 'value'])
        return frame.sort_values(['imputation_index', 'subject_id', 'target_time'], kind='mergesort').reset_index(
            drop=True)

    @classmethod
    def from_frame(cls, frame):
        frame = frame.sort_values(['imputation_index', 'subject_id', 'target_time'], kind='mergesort')
        n_imputations = int(frame['imputation_index'].max()) + 1 if len(frame) else 0
        draws = {}
        for (subject_id, target_time), group in frame.groupby(['subject_id', 'target_time'], sort=True):
            draws[(str(subject_id), float(target_time))] = group.sort_values('imputation_index')['value'].tolist()
        targets = tuple(PredictionTarget(subject_id=sid, target_time=t) for sid, t in draws)
        return cls(schedule=tuple(range(n_imputations)), targets=targets, draws=draws)

    def point_predictions(self):
        """Posterior-predictive mean per (subject, time) cell."""
        return {key: float(np.mean(values)) for key, values in self.draws.items() if values}


def _mean_under(theta, x, target_time, spline_spec, include_time):
    x_star = augment_covariates(x, [target_time], include_time)[0]
    z = spline_spec.basis([target_time])[0]
    return float(x_star @ theta.beta + z @ theta.eta)


def predict_observed(subject_index, x, state, target_time, spline_spec, rng):
    """Draw N(x*ᵀβ_k + z(t*)ᵀη_k + u_i, σ²_k) from the subject's current θ-cluster."""
    if not 0 <= subject_index < state.partition.n or state.partition.s_y[subject_index] < 0:
        raise DataError('UNKNOWN_SUBJECT', 'subject index {} has no cluster'.format(subject_index))
    theta = state.theta_atoms[int(state.partition.s_y[subject_index])]
    include_time = spline_spec.kind is SplineKind.NONE
    mean = _mean_under(theta, x, target_time, spline_spec, include_time) + state.u[subject_index]
    return float(rng.normal(mean, np.sqrt(theta.sigma2)))


def new_subject_cluster_weights(x, state, priors, p1, mode=SamplerMode.EDP):
    """Probabilities over the existing θ-clusters (in key order) followed by a brand-new cluster."""
    partition = state.partition
    n = partition.n
    keys = partition.theta_keys()
    log_f0 = float(conjugate.log_prior_predictive_x0(x, p1, priors))
    alpha_theta, alpha_psi = state.alpha_theta, state.alpha_psi

    if mode is SamplerMode.SINGLE:
        weights = np.zeros(len(keys) + 1)
        weights[0] = 1.0
        return weights

    log_weights = []
    for k in keys:
        n_k = partition.n_theta[k]
        inner = partition.psi_keys(k)
        log_fx = conjugate.log_covariate_density(x, conjugate.stack_psi([state.psi_atoms[(k, j)] for j in inner]),
                                                 p1)
        if mode is SamplerMode.DP:
            log_weights.append(np.log(n_k) + log_fx[0] - np.log(alpha_theta + n))
            continue
        n_jk = np.array([partition.n_psi[k][j] for j in inner], dtype=float)
        covariate_term = logsumexp(np.concatenate([[np.log(alpha_psi) + log_f0], np.log(n_jk) + log_fx])) \
            - np.log(alpha_psi + n_k)
        log_weights.append(np.log(n_k) - np.log(alpha_theta + n) + covariate_term)
    log_weights.append(np.log(alpha_theta) - np.log(alpha_theta + n) + log_f0)
    log_weights = np.array(log_weights)
    return np.exp(log_weights - logsumexp(log_weights))


def predict_new(x, state, priors, target_time, spline_spec, rng, p1, mode=SamplerMode.EDP):
    """Draw for a subject without a fitted intercept.

    Picks an existing θ-cluster or a fresh θ from the base measure, then adds u ~ N(0, σ²_u).
    """
    keys = state.partition.theta_keys()
    include_time = spline_spec.kind is SplineKind.NONE
    probs = new_subject_cluster_weights(x, state, priors, p1, mode)
    cumulative = np.cumsum(probs)
    slot = min(int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side='right')), len(probs) - 1)
    if slot < len(keys):
        theta = state.theta_atoms[keys[slot]]
    else:
        d_beta = 1 + len(np.asarray(x).reshape(-1)) + (1 if include_time else 0)
        theta = conjugate.draw_theta_prior(priors, d_beta, spline_spec.dim, rng)
    u = rng.normal(0.0, np.sqrt(state.sigma2_u))
    mean = _mean_under(theta, x, target_time, spline_spec, include_time) + u
    return float(rng.normal(mean, np.sqrt(theta.sigma2)))


def draw_imputations(state, dataset, targets, spline_spec, priors, rng, mode=SamplerMode.EDP):
    """One predictive value per target at the current state, routed by whether the subject has outcomes."""
    p1 = dataset.schema.p1
    values = []
    for target in targets:
        index = dataset.index_of(target.subject_id)
        subject = dataset.subjects[index]
        if target.mode is TargetMode.OBSERVED_SUBJECT and subject.n_obs:
            values.append(predict_observed(index, subject.x, state, target.target_time, spline_spec, rng))
        else:
            values.append(predict_new(subject.x, state, priors, target.target_time, spline_spec, rng, p1, mode))
    return values


def collect_imputations(snapshots, targets, schedule, dataset, spline_spec, priors, rng, mode=SamplerMode.EDP):
    """Build an ImputationSet from (iteration, state) pairs taken at the scheduled iterations."""
    imputations = ImputationSet.empty(schedule, targets)
    for iteration, state in snapshots:
        imputations.add(iteration, draw_imputations(state, dataset, targets, spline_spec, priors, rng, mode))
    if not imputations.is_complete():
        raise ConfigError('SCHEDULE_OUT_OF_RANGE', 'not every scheduled iteration produced draws')
    return imputations


def classify_threshold(imputations, threshold, observed=None, events=None):
    """Per imputation and subject: 1 if a recorded event exists or any observed or imputed value is >= threshold.

    ``observed`` maps subject_id to observed outcome values, ``events`` maps
    subject_id to a 0/1 recorded-event flag.
    """
    observed = observed or {}
    events = events or {}
    subject_ids = sorted({sid for sid, _ in imputations.draws} | set(events))
    n_imputations = len(imputations.schedule)

    base = {}
    for sid in subject_ids:
        values = np.asarray(observed.get(sid, ()), dtype=float)
        base[sid] = bool(events.get(sid, 0)) or bool(np.any(values >= threshold))

    exceed = {sid: np.zeros(n_imputations, dtype=bool) for sid in subject_ids}
    for (sid, _), values in imputations.draws.items():
        exceed[sid] |= np.asarray(values, dtype=float) >= threshold

    rows = [(m, sid, int(base[sid] or exceed[sid][m])) for m in range(n_imputations) for sid in subject_ids]
    return pd.DataFrame(rows, columns=['imputation_index', 'subject_id', 'outcome'])


@dataclass
class RubinResult:
    estimate: float
    within_variance: float
    between_variance: float
    total_variance: float
    df: float
    ci_low: float
    ci_high: float
    n_imputations: int


def rubin_combine(estimates, variances, level=0.95):
    """Pool M completed-data estimates with Rubin's rules."""
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    m = estimates.size
    if m < 2:
        raise DataError('TOO_FEW_IMPUTATIONS', 'Rubin pooling needs at least 2 imputations, got {}'.format(m))
    q_bar = float(estimates.mean())
    w_bar = float(variances.mean())
    b = float(estimates.var(ddof=1))
    inflation = (1.0 + 1.0 / m) * b
    total = w_bar + inflation
    if inflation > 0:
        df = (m - 1) * (1.0 + w_bar / inflation) ** 2
        quantile = stats.t.ppf(0.5 + level / 2.0, df)
    else:
        df = float('inf')
        quantile = stats.norm.ppf(0.5 + level / 2.0)
    half_width = quantile * np.sqrt(total)
    return RubinResult(estimate=q_bar, within_variance=w_bar, between_variance=b, total_variance=total, df=df,
                       ci_low=q_bar - half_width, ci_high=q_bar + half_width, n_imputations=m)


@dataclass
class IncidenceResult:
    rates: np.ndarray
    estimate: float
    ci_low: float
    ci_high: float
    total_variance: float
    log_scale: RubinResult


def incidence_rate(events, person_time, level=0.95):
    """Per-imputation event rates pooled on the log scale with Var(log rate) ≈ 1/events.

    ``total_variance`` is on the rate scale, exp(q̄)²·T by the delta method.
    """
    events = np.asarray(events, dtype=float)
    if not np.isfinite(person_time) or person_time <= 0:
        raise DataError('INVALID_PERSON_TIME', 'person-time must be positive, got {}'.format(person_time))
    if np.any(events <= 0):
        raise DataError('ZERO_EVENTS', 'log-rate variance is undefined for an imputation without events')
    rates = events / person_time
    pooled = rubin_combine(np.log(rates), 1.0 / events, level)
    estimate = float(np.exp(pooled.estimate))
    return IncidenceResult(rates=rates, estimate=estimate, ci_low=float(np.exp(pooled.ci_low)),
                           ci_high=float(np.exp(pooled.ci_high)), total_variance=estimate ** 2 * pooled.total_variance,
                           log_scale=pooled)