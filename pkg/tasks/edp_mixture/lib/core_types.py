"""Domain data model shared by every module: datasets, priors, partitions and atoms."""

import io
import logging
from dataclasses import dataclass, field, fields
from enum import Enum

import joblib
import numpy as np

from tasks.edp_mixture.lib.errors import ConfigError, DataError

log = logging.getLogger(__name__)


class ColumnKind(Enum):
    BINARY = 'binary'
    CONTINUOUS = 'continuous'


class SamplerMode(Enum):
    EDP = 'EDP'
    DP = 'DP'
    SINGLE = 'SINGLE'


def coerce_value(key, value, kind):
    """Cast a config value, raising CONFIG_INVALID instead of TypeError/ValueError."""
    try:
        if kind is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                    raise ValueError(value)
                return lowered in ('true', '1', 'yes')
            return bool(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError('CONFIG_INVALID', 'key {!r} expects {}, got {!r}'.format(key, kind.__name__, value), key=key)


def known_fields(cls, config, exclude=()):
    """The entries of a merged config that name fields of ``cls``."""
    names = {f.name for f in fields(cls)} - set(exclude)
    ignored = sorted(k for k in config if k not in names)
    if ignored:
        log.debug('%s ignores config keys %s', cls.__name__, ignored)
    return {k: v for k, v in config.items() if k in names}


@dataclass(frozen=True)
class CovariateSchema:
    """Column names and kinds, binary columns first."""
    names: tuple = ()
    kinds: tuple = ()

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise DataError('SCHEMA_MISMATCH', 'schema has {} names but {} kinds'.format(len(self.names),
                                                                                        len(self.kinds)))
        if len(set(self.names)) != len(self.names):
            raise DataError('SCHEMA_MISMATCH', 'duplicate covariate names in schema')
        seen_continuous = False
        for name, kind in zip(self.names, self.kinds):
            if not isinstance(kind, ColumnKind):
                raise DataError('SCHEMA_MISMATCH', 'column {!r} has unknown kind {!r}'.format(name, kind))
            if kind is ColumnKind.CONTINUOUS:
                seen_continuous = True
            elif seen_continuous:
                raise DataError('SCHEMA_MISMATCH', 'binary column {!r} follows a continuous column'.format(name))

    @classmethod
    def from_pairs(cls, pairs):
        """Build from (name, kind) pairs in any order; binary columns are moved first, order otherwise kept."""
        pairs = [(name, ColumnKind(kind) if not isinstance(kind, ColumnKind) else kind) for name, kind in pairs]
        ordered = [p for p in pairs if p[1] is ColumnKind.BINARY] + [p for p in pairs if p[1] is ColumnKind.CONTINUOUS]
        return cls(names=tuple(p[0] for p in ordered), kinds=tuple(p[1] for p in ordered))

    @property
    def p1(self):
        return sum(1 for k in self.kinds if k is ColumnKind.BINARY)

    @property
    def p2(self):
        return len(self.kinds) - self.p1

    @property
    def p(self):
        return len(self.kinds)


@dataclass
class SubjectRecord:
    id: str
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray

    @property
    def n_obs(self):
        return len(self.t)


@dataclass
class LongitudinalDataset:
    schema: CovariateSchema
    subjects: list

    @property
    def n(self):
        return len(self.subjects)

    @property
    def N(self):
        return int(sum(s.n_obs for s in self.subjects))

    def subject_ids(self):
        return [s.id for s in self.subjects]

    def index_of(self, subject_id):
        if not hasattr(self, '_index'):
            self._index = {s.id: i for i, s in enumerate(self.subjects)}
        try:
            return self._index[subject_id]
        except KeyError:
            raise DataError('UNKNOWN_SUBJECT', 'subject is not part of the dataset', subject_id=subject_id)

    def covariate_matrix(self):
        if not self.subjects:
            return np.zeros((0, self.schema.p))
        return np.vstack([s.x for s in self.subjects]).reshape(self.n, self.schema.p)

    def all_times(self):
        if not self.subjects:
            return np.zeros(0)
        return np.concatenate([s.t for s in self.subjects])


def validate_dataset(raw):
    """Check every dataset invariant and return a clean copy with float arrays.

    Raises DataError with NON_FINITE, LENGTH_MISMATCH, NON_BINARY_VALUE,
    SCHEMA_MISMATCH or UNSORTED_TIMES, naming the offending subject.
    """
    schema = raw.schema
    p1 = schema.p1
    seen = set()
    subjects = []
    for record in raw.subjects:
        sid = str(record.id)
        if sid in seen:
            raise DataError('SCHEMA_MISMATCH', 'duplicate subject id', subject_id=sid)
        seen.add(sid)

        x = np.asarray(record.x, dtype=float).reshape(-1)
        t = np.asarray(record.t, dtype=float).reshape(-1)
        y = np.asarray(record.y, dtype=float).reshape(-1)

        if x.shape[0] != schema.p:
            raise DataError('SCHEMA_MISMATCH', 'covariate vector has length {}, schema has {} columns'.format(
                x.shape[0], schema.p), subject_id=sid)
        if t.shape[0] != y.shape[0]:
            raise DataError('LENGTH_MISMATCH', 'time vector has length {} but outcome vector has length {}'.format(
                t.shape[0], y.shape[0]), subject_id=sid)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise DataError('NON_FINITE', 'NaN or infinite value in covariates, times or outcomes', subject_id=sid)
        binary = x[:p1]
        if np.any((binary != 0.0) & (binary != 1.0)):
            bad = schema.names[int(np.flatnonzero((binary != 0.0) & (binary != 1.0))[0])]
            raise DataError('NON_BINARY_VALUE', 'binary column {!r} must be 0 or 1'.format(bad), subject_id=sid)
        if t.shape[0] > 1 and np.any(np.diff(t) < 0):
            raise DataError('UNSORTED_TIMES', 'observation times must be nondecreasing', subject_id=sid)

        subjects.append(SubjectRecord(id=sid, x=x.copy(), t=t.copy(), y=y.copy()))

    dataset = LongitudinalDataset(schema=schema, subjects=subjects)
    log.debug('validated dataset n=%s N=%s p1=%s p2=%s', dataset.n, dataset.N, schema.p1, schema.p2)
    return dataset


@dataclass
class Priors:
    a_beta: float = 2.0
    b_beta: float = 10.0
    beta0: float = 0.0
    a_eta: float = 2.0
    b_eta: float = 1.0
    a_y: float = 2.0
    b_y: float = 1.0
    a_x: float = 1.0
    b_x: float = 1.0
    nu0: float = 2.0
    tau0_sq: float = 1.0
    mu0: float = 0.0
    c0: float = 0.5
    a_u: float = 2.0
    b_u: float = 0.5
    a_theta: float = 1.0
    b_theta: float = 1.0
    a_psi: float = 1.0
    b_psi: float = 1.0

    UNSIGNED = ('beta0', 'mu0')

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == 'beta0' and np.ndim(value) > 0:
                value = np.asarray(value, dtype=float)
                if not np.all(np.isfinite(value)):
                    raise ConfigError('CONFIG_INVALID', 'beta0 must be finite', key='beta0')
                setattr(self, f.name, value)
                continue
            value = coerce_value(f.name, value, float)
            if not np.isfinite(value):
                raise ConfigError('CONFIG_INVALID', '{} must be finite'.format(f.name), key=f.name)
            if f.name not in self.UNSIGNED and value <= 0:
                raise ConfigError('CONFIG_INVALID', '{} must be strictly positive, got {}'.format(f.name, value),
                                  key=f.name)
            setattr(self, f.name, value)

    @classmethod
    def from_config(cls, config):
        return cls(**known_fields(cls, config))

    def beta0_vector(self, dim):
        beta0 = np.asarray(self.beta0, dtype=float)
        if beta0.ndim == 0:
            return np.full(dim, float(beta0))
        if beta0.shape[0] != dim:
            raise ConfigError('CONFIG_INVALID', 'beta0 has length {}, regression has {} coefficients'.format(
                beta0.shape[0], dim), key='beta0')
        return beta0.copy()


@dataclass
class ThetaParams:
    beta: np.ndarray
    sigma2_beta: float
    eta: np.ndarray
    sigma2_eta: float
    sigma2: float


@dataclass
class PsiParams:
    """Covariate atoms: Bernoulli ``p`` for the binary block, (``mu``, ``sigma2_mu``) for the continuous one."""
    p: np.ndarray
    mu: np.ndarray
    sigma2_mu: np.ndarray


@dataclass
class NestedPartition:
    """Per-subject (θ-cluster, ψ-subcluster) labels and their counts.

    During an assignment sweep a removed subject carries label -1 and keys may
    be sparse; ``compact`` renumbers to dense integers afterwards.
    """
    s_y: np.ndarray
    s_x: np.ndarray
    n_theta: dict = field(default_factory=dict)
    n_psi: dict = field(default_factory=dict)

    @classmethod
    def from_labels(cls, s_y, s_x=None):
        s_y = np.asarray(s_y, dtype=np.int64).copy()
        s_x = np.zeros_like(s_y) if s_x is None else np.asarray(s_x, dtype=np.int64).copy()
        partition = cls(s_y=s_y, s_x=s_x)
        partition.n_theta, partition.n_psi = partition.recount()
        return partition

    @property
    def n(self):
        return len(self.s_y)

    def recount(self):
        n_theta = {}
        n_psi = {}
        for k, j in zip(self.s_y.tolist(), self.s_x.tolist()):
            if k < 0:
                continue
            n_theta[k] = n_theta.get(k, 0) + 1
            inner = n_psi.setdefault(k, {})
            inner[j] = inner.get(j, 0) + 1
        return n_theta, n_psi

    def check(self):
        """True when the stored counts match a recount and no cluster is empty."""
        n_theta, n_psi = self.recount()
        if n_theta != self.n_theta or n_psi != self.n_psi:
            return False
        for k, inner in self.n_psi.items():
            if sum(inner.values()) != self.n_theta.get(k, 0):
                return False
        return all(c > 0 for c in self.n_theta.values())

    def theta_keys(self):
        return sorted(self.n_theta)

    def psi_keys(self, k):
        return sorted(self.n_psi.get(k, {}))

    def n_psi_total(self):
        return sum(len(inner) for inner in self.n_psi.values())

    def remove(self, i):
        """Take subject i out; report which clusters became empty."""
        k, j = int(self.s_y[i]), int(self.s_x[i])
        self.s_y[i] = -1
        self.s_x[i] = -1
        self.n_theta[k] -= 1
        self.n_psi[k][j] -= 1
        psi_emptied = self.n_psi[k][j] == 0
        if psi_emptied:
            del self.n_psi[k][j]
        theta_emptied = self.n_theta[k] == 0
        if theta_emptied:
            del self.n_theta[k]
            del self.n_psi[k]
        return k, j, theta_emptied, psi_emptied

    def add(self, i, k, j):
        self.s_y[i] = k
        self.s_x[i] = j
        self.n_theta[k] = self.n_theta.get(k, 0) + 1
        inner = self.n_psi.setdefault(k, {})
        inner[j] = inner.get(j, 0) + 1

    def new_theta_key(self):
        return max(self.n_theta) + 1 if self.n_theta else 0

    def new_psi_key(self, k):
        inner = self.n_psi.get(k, {})
        return max(inner) + 1 if inner else 0

    def compact(self):
        """Renumber θ keys (and ψ keys within each θ) densely by first appearance in subject order."""
        theta_map = {}
        psi_map = {}
        psi_used = {}
        old_pairs = list(zip(self.s_y.tolist(), self.s_x.tolist()))
        for k, j in old_pairs:
            if k not in theta_map:
                theta_map[k] = len(theta_map)
            if (k, j) not in psi_map:
                new_k = theta_map[k]
                psi_map[(k, j)] = (new_k, psi_used.get(new_k, 0))
                psi_used[new_k] = psi_used.get(new_k, 0) + 1
        self.s_y = np.array([psi_map[pair][0] for pair in old_pairs], dtype=np.int64)
        self.s_x = np.array([psi_map[pair][1] for pair in old_pairs], dtype=np.int64)
        self.n_theta, self.n_psi = self.recount()
        return theta_map, psi_map

    def pairs(self):
        return np.column_stack([self.s_y, self.s_x])


@dataclass
class ChainState:
    partition: NestedPartition
    theta_atoms: dict
    psi_atoms: dict
    u: np.ndarray
    sigma2_u: float
    alpha_theta: float
    alpha_psi: float
    rng: np.random.Generator

    def keys_consistent(self):
        theta_keys = set(self.partition.n_theta)
        psi_keys = {(k, j) for k, inner in self.partition.n_psi.items() for j in inner}
        return set(self.theta_atoms) == theta_keys and set(self.psi_atoms) == psi_keys

    def relabel(self):
        """Compact the partition and re-key the atom maps to match."""
        theta_map, psi_map = self.partition.compact()
        self.theta_atoms = {theta_map[k]: atom for k, atom in self.theta_atoms.items() if k in theta_map}
        self.psi_atoms = {psi_map[key]: atom for key, atom in self.psi_atoms.items() if key in psi_map}

    def to_bytes(self):
        buffer = io.BytesIO()
        joblib.dump(self, buffer)
        return buffer.getvalue()

    @staticmethod
    def from_bytes(payload):
        return joblib.load(io.BytesIO(payload))


def evenly_spaced_schedule(n_iter, n_burnin, n_draws):
    """Iterations n_burnin + step, ..., n_burnin + n_draws*step with step = (n_iter - n_burnin) // n_draws."""
    if n_draws < 1:
        return ()
    step = (n_iter - n_burnin) // n_draws
    if step < 1:
        raise ConfigError('SCHEDULE_OUT_OF_RANGE', 'cannot place {} draws in {} post burn-in iterations'.format(
            n_draws, n_iter - n_burnin))
    return tuple(n_burnin + step * (i + 1) for i in range(n_draws))


@dataclass
class SamplerConfig:
    n_iter: int = 2000
    n_burnin: int = 500
    thin: int = 1
    m_aux: int = 3
    mode: SamplerMode = SamplerMode.EDP
    prediction_schedule: tuple = ()
    seed: int = 0
    shuffle: bool = False
    n_init_clusters: int = 2
    fixed_concentrations: bool = False
    legacy_updates: bool = False
    proposal_a0: float = None
    proposal_b0: float = None
    log_every: int = 500

    def __post_init__(self):
        self.n_iter = coerce_value('n_iter', self.n_iter, int)
        self.n_burnin = coerce_value('n_burnin', self.n_burnin, int)
        self.thin = coerce_value('thin', self.thin, int)
        self.m_aux = coerce_value('m_aux', self.m_aux, int)
        self.seed = coerce_value('seed', self.seed, int)
        self.shuffle = coerce_value('shuffle', self.shuffle, bool)
        self.n_init_clusters = coerce_value('n_init_clusters', self.n_init_clusters, int)
        self.fixed_concentrations = coerce_value('fixed_concentrations', self.fixed_concentrations, bool)
        self.legacy_updates = coerce_value('legacy_updates', self.legacy_updates, bool)
        self.log_every = coerce_value('log_every', self.log_every, int)
        if not isinstance(self.mode, SamplerMode):
            try:
                self.mode = SamplerMode(str(self.mode).upper())
            except ValueError:
                raise ConfigError('CONFIG_INVALID', 'mode must be one of EDP, DP, SINGLE, got {!r}'.format(self.mode),
                                  key='mode')
        self.prediction_schedule = tuple(coerce_value('prediction_schedule', it, int)
                                         for it in self.prediction_schedule)
        self.validate()

    def validate(self):
        if self.n_iter < 1 or self.n_burnin < 0 or self.n_burnin >= self.n_iter:
            raise ConfigError('CONFIG_INVALID', 'need 0 <= n_burnin < n_iter, got n_burnin={} n_iter={}'.format(
                self.n_burnin, self.n_iter), key='n_burnin')
        if self.m_aux < 1:
            raise ConfigError('CONFIG_INVALID', 'm_aux must be >= 1', key='m_aux')
        if self.thin < 1:
            raise ConfigError('CONFIG_INVALID', 'thin must be >= 1', key='thin')
        if self.n_init_clusters < 1:
            raise ConfigError('CONFIG_INVALID', 'n_init_clusters must be >= 1', key='n_init_clusters')
        for it in self.prediction_schedule:
            if not self.n_burnin < it <= self.n_iter:
                raise ConfigError('SCHEDULE_OUT_OF_RANGE', 'scheduled iteration {} outside ({}, {}]'.format(
                    it, self.n_burnin, self.n_iter), key='prediction_schedule')
        if list(self.prediction_schedule) != sorted(set(self.prediction_schedule)):
            raise ConfigError('CONFIG_INVALID', 'prediction_schedule must be strictly increasing',
                              key='prediction_schedule')
        skipped = [it for it in self.prediction_schedule if not self.retained(it)]
        if skipped:
            log.warning('scheduled iterations %s are not retained with thin=%s', skipped, self.thin)

    @classmethod
    def from_config(cls, config):
        kwargs = known_fields(cls, config)
        for key in ('proposal_a0', 'proposal_b0'):
            if kwargs.get(key) is not None:
                kwargs[key] = coerce_value(key, kwargs[key], float)
        if 'prediction_schedule' in kwargs and kwargs['prediction_schedule'] is None:
            kwargs['prediction_schedule'] = ()
        n_imputations = config.get('n_imputations')
        if n_imputations and not kwargs.get('prediction_schedule'):
            kwargs['prediction_schedule'] = evenly_spaced_schedule(
                coerce_value('n_iter', kwargs.get('n_iter', cls.n_iter), int),
                coerce_value('n_burnin', kwargs.get('n_burnin', cls.n_burnin), int),
                coerce_value('n_imputations', n_imputations, int))
        return cls(**kwargs)

    def retained(self, iteration):
        return iteration > self.n_burnin and (iteration - self.n_burnin) % self.thin == 0


def augment_covariates(x, times, include_time=False):
    """Rows x* = (1, x) for each time, with the time appended when no spline carries it."""
    x = np.asarray(x, dtype=float).reshape(-1)
    times = np.asarray(times, dtype=float).reshape(-1)
    columns = [np.ones((times.size, 1)), np.tile(x, (times.size, 1))]
    if include_time:
        columns.append(times[:, None])
    return np.hstack(columns)


def regression_dim(schema, include_time=False):
    return 1 + schema.p + (1 if include_time else 0)
