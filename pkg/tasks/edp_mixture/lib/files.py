"""File formats: dataset CSVs, schema, traces, partitions, imputations, configs, manifests and state snapshots.

Parsers reject malformed rows instead of coercing them; errors carry the file
path and the 1-based line number (the header is line 1).
"""

import hashlib
import json
import logging
import os
import re

import numpy as np
import pandas as pd
import yaml

from tasks.edp_mixture import __version__
from tasks.edp_mixture.lib.core_types import (ChainState, ColumnKind, CovariateSchema, LongitudinalDataset,
                                              SubjectRecord, validate_dataset)
from tasks.edp_mixture.lib.errors import ConfigError, DataError, EdpError

log = logging.getLogger(__name__)

OBSERVATION_COLUMNS = ['subject_id', 'time', 'y']
TRACE_COLUMNS = ['iteration', 'n_theta', 'n_psi', 'alpha_theta', 'alpha_psi', 'sigma2_u', 'loglik']
PARTITION_COLUMNS = ['iteration', 'subject_id', 's_y', 's_x']
IMPUTATION_COLUMNS = ['imputation_index', 'subject_id', 'target_time', 'value']
EVENT_COLUMNS = ['subject_id', 'event', 'person_time']
TARGET_COLUMNS = ['subject_id', 'target_time']
KEY_VALUE_LINE = re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$')


def _read_csv(path, columns, numeric=()):
    """Read a CSV with an exact header; ids stay strings and ``numeric`` columns must parse."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise DataError('IO', 'file not found', path=path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError('IO', 'cannot read CSV: {}'.format(e), path=path)

    if columns is not None and list(frame.columns) != list(columns):
        raise DataError('MALFORMED_ROW', 'expected header {}, got {}'.format(','.join(columns),
                                                                             ','.join(frame.columns)),
                        path=path, line=1)
    for column in numeric:
        parsed = pd.to_numeric(frame[column].str.strip(), errors='coerce')
        bad = parsed.isna()
        if bad.any():
            index = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError('MALFORMED_ROW', 'column {!r} has non-numeric value {!r}'.format(
                column, frame[column].iloc[index]), path=path, line=index + 2)
        frame[column] = parsed.astype(float)
    return frame


def read_schema(path):
    """Lines ``<name>:binary|continuous``; blank lines and ``#`` comments are skipped."""
    pairs = []
    try:
        with open(path) as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise DataError('IO', 'cannot read schema: {}'.format(e), path=path)
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        name, _, kind = line.partition(':')
        name, kind = name.strip(), kind.strip().lower()
        if not name or kind not in ('binary', 'continuous'):
            raise DataError('MALFORMED_ROW', 'expected <name>:binary|continuous, got {!r}'.format(line),
                            path=path, line=number)
        pairs.append((name, ColumnKind(kind)))
    return CovariateSchema.from_pairs(pairs)


def write_schema(schema, path):
    with open(path, 'w') as handle:
        for name, kind in zip(schema.names, schema.kinds):
            handle.write('{}:{}\n'.format(name, kind.value))


def read_observations(path, time_scale=1.0):
    frame = _read_csv(path, OBSERVATION_COLUMNS, numeric=('time', 'y'))
    frame['line'] = np.arange(len(frame)) + 2
    if time_scale != 1.0:
        frame['time'] = frame['time'] / time_scale
    return frame


def read_covariates(path, schema):
    frame = _read_csv(path, None)
    expected = set(schema.names)
    if frame.columns[0] != 'subject_id' or set(frame.columns[1:]) != expected or \
            len(frame.columns) != len(expected) + 1:
        raise DataError('MALFORMED_ROW', 'covariate header must be subject_id followed by the schema columns',
                        path=path, line=1)
    frame = _read_csv(path, list(frame.columns), numeric=schema.names)
    duplicated = frame['subject_id'].duplicated()
    if duplicated.any():
        index = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise DataError('MALFORMED_ROW', 'duplicate subject_id', path=path, line=index + 2,
                        subject_id=frame['subject_id'].iloc[index])
    return frame[['subject_id'] + list(schema.names)]


def load_dataset(observations_path, covariates_path, schema_path, time_scale=1.0):
    """Covariates define the subject set; observations are grouped per subject and sorted by time."""
    schema = read_schema(schema_path)
    covariates = read_covariates(covariates_path, schema)
    observations = read_observations(observations_path, time_scale)

    known = set(covariates['subject_id'])
    unknown = ~observations['subject_id'].isin(known)
    if unknown.any():
        row = observations[unknown].iloc[0]
        raise DataError('UNKNOWN_SUBJECT', 'observation for a subject without covariates',
                        path=observations_path, line=int(row['line']), subject_id=row['subject_id'])

    grouped = {sid: group.sort_values('time', kind='mergesort')
               for sid, group in observations.groupby('subject_id', sort=False)}
    empty = pd.DataFrame({'time': [], 'y': []})
    subjects = []
    for _, row in covariates.iterrows():
        group = grouped.get(row['subject_id'], empty)
        subjects.append(SubjectRecord(id=row['subject_id'], x=row[list(schema.names)].to_numpy(dtype=float),
                                      t=group['time'].to_numpy(dtype=float), y=group['y'].to_numpy(dtype=float)))
    dataset = validate_dataset(LongitudinalDataset(schema=schema, subjects=subjects))
    log.info('loaded %s subjects, %s observations, %s binary and %s continuous covariates',
             dataset.n, dataset.N, schema.p1, schema.p2)
    return dataset


def write_dataset(dataset, out_dir):
    """Write observations.csv, covariates.csv and schema.txt; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    rows = [(s.id, t, y) for s in dataset.subjects for t, y in zip(s.t, s.y)]
    observations = pd.DataFrame(rows, columns=OBSERVATION_COLUMNS)
    covariates = pd.DataFrame(dataset.covariate_matrix(), columns=list(dataset.schema.names))
    covariates.insert(0, 'subject_id', dataset.subject_ids())
    for name, kind in zip(dataset.schema.names, dataset.schema.kinds):
        if kind is ColumnKind.BINARY:
            covariates[name] = covariates[name].astype(int)

    paths = {'observations': os.path.join(out_dir, 'observations.csv'),
             'covariates': os.path.join(out_dir, 'covariates.csv'),
             'schema': os.path.join(out_dir, 'schema.txt')}
    observations.to_csv(paths['observations'], index=False)
    covariates.to_csv(paths['covariates'], index=False)
    write_schema(dataset.schema, paths['schema'])
    return paths


def traces_frame(traces):
    return pd.DataFrame([(t.iteration, t.n_theta_clusters, t.n_psi_clusters_total, t.alpha_theta, t.alpha_psi,
                          t.sigma2_u, t.log_likelihood) for t in traces], columns=TRACE_COLUMNS)


def write_traces(traces, path):
    traces_frame(traces).to_csv(path, index=False)


def read_traces(path):
    frame = _read_csv(path, TRACE_COLUMNS, numeric=TRACE_COLUMNS)
    for column in ('iteration', 'n_theta', 'n_psi'):
        frame[column] = frame[column].astype(int)
    return frame


def write_partitions(traces, subject_ids, path):
    frames = []
    for trace in traces:
        frames.append(pd.DataFrame({'iteration': trace.iteration, 'subject_id': subject_ids,
                                    's_y': trace.partition[:, 0], 's_x': trace.partition[:, 1]}))
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=PARTITION_COLUMNS)
    frame.to_csv(path, index=False)


def read_partitions(path):
    """Returns (subject_ids, iterations, list of n×2 label arrays) with subjects in first-iteration order."""
    frame = _read_csv(path, PARTITION_COLUMNS, numeric=('iteration', 's_y', 's_x'))
    subject_ids = None
    iterations = []
    snapshots = []
    for iteration, group in frame.groupby('iteration', sort=True):
        ids = group['subject_id'].tolist()
        if subject_ids is None:
            subject_ids = ids
        elif ids != subject_ids:
            raise DataError('LENGTH_MISMATCH', 'iteration {} lists a different subject set'.format(int(iteration)),
                            path=path)
        iterations.append(int(iteration))
        snapshots.append(group[['s_y', 's_x']].to_numpy(dtype=np.int64))
    return subject_ids or [], iterations, snapshots


def write_labels(subject_ids, labels, path):
    pd.DataFrame({'subject_id': subject_ids, 'cluster_label': labels}).to_csv(path, index=False)


def read_targets(path, time_scale=1.0):
    frame = _read_csv(path, TARGET_COLUMNS, numeric=('target_time',))
    if time_scale != 1.0:
        frame['target_time'] = frame['target_time'] / time_scale
    return dict(zip(frame['subject_id'], frame['target_time']))


def read_events(path):
    frame = _read_csv(path, EVENT_COLUMNS, numeric=('event', 'person_time'))
    bad = ~frame['event'].isin([0.0, 1.0])
    if bad.any():
        index = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError('MALFORMED_ROW', 'event must be 0 or 1', path=path, line=index + 2)
    return frame


def write_imputations(imputations, path):
    imputations.to_frame().to_csv(path, index=False)


def read_imputations(path):
    frame = _read_csv(path, IMPUTATION_COLUMNS, numeric=('imputation_index', 'target_time', 'value'))
    frame['imputation_index'] = frame['imputation_index'].astype(int)
    return frame


def _parse_key_values(text, path):
    config = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        match = KEY_VALUE_LINE.match(stripped)
        if not match:
            raise ConfigError('CONFIG_INVALID', 'expected key = value, got {!r}'.format(line.strip()),
                              path=path, line=number)
        try:
            config[match.group(1)] = yaml.safe_load(match.group(2)) if match.group(2) else None
        except yaml.YAMLError:
            config[match.group(1)] = match.group(2)
    return config


def load_config(path):
    """Flat configuration from YAML ``key: value`` or ``key = value`` lines."""
    if path is None:
        return {}
    try:
        with open(path) as handle:
            text = handle.read()
    except OSError as e:
        raise ConfigError('IO', 'cannot read config: {}'.format(e), path=path)

    lines = [line.split('#', 1)[0] for line in text.splitlines()]
    if any(KEY_VALUE_LINE.match(line) and ':' not in line for line in lines if line.strip()):
        return _parse_key_values(text, path)
    try:
        config = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        raise ConfigError('CONFIG_INVALID', 'config is not valid YAML', path=path,
                          line=mark.line + 1 if mark is not None else None)
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise ConfigError('CONFIG_INVALID', 'config must be a mapping of key: value pairs', path=path, line=1)
    for key, value in config.items():
        if isinstance(value, dict):
            raise ConfigError('CONFIG_INVALID', 'nested value for key {!r} is not allowed'.format(key), path=path,
                              key=key)
    return config


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def config_sha256(config):
    """Digest of the config serialised with sorted keys and no whitespace."""
    canonical = json.dumps(_jsonable(config or {}), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, 'value') and not isinstance(value, (int, float, str, bool)):
        return value.value
    return value


def write_json(payload, path):
    with open(path, 'w') as handle:
        json.dump(_jsonable(payload), handle, indent=2, sort_keys=True)
        handle.write('\n')


def read_json(path):
    try:
        with open(path) as handle:
            return json.load(handle)
    except OSError as e:
        raise DataError('IO', 'cannot read JSON: {}'.format(e), path=path)
    except ValueError as e:
        raise DataError('MALFORMED_ROW', 'invalid JSON: {}'.format(e), path=path)


def write_manifest(out_dir, command, inputs, config, seed, outputs=None, extra=None):
    """Record what is needed to reproduce a command's outputs: input hashes, config, seed and version."""
    manifest = {
        'command': command,
        'version': __version__,
        'seed': seed,
        'config': config,
        'config_sha256': config_sha256(config),
        'inputs': {name: {'path': os.path.abspath(path), 'sha256': sha256_file(path)}
                   for name, path in sorted(inputs.items()) if path is not None},
        'outputs': sorted(outputs or []),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, 'manifest.json')
    write_json(manifest, path)
    return path


def save_state(state, path):
    with open(path, 'wb') as handle:
        handle.write(state.to_bytes())


def load_state(path):
    try:
        with open(path, 'rb') as handle:
            return ChainState.from_bytes(handle.read())
    except OSError as e:
        raise EdpError('IO', 'cannot read state snapshot: {}'.format(e), path=path)
