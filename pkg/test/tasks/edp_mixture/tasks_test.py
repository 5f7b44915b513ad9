import json
import os

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from tasks.edp_mixture import runner
from tasks.edp_mixture.lib.errors import ConfigError, DataError

simulate_config = {'n': 20, 'max_obs': 3, 'seed': 4}
fit_config = {'n_iter': 10, 'n_burnin': 4, 'm_aux': 2, 'spline_kind': 'BSPLINE', 'n_knots': 2, 'log_every': 0,
              'seed': 3}


@pytest.fixture
def simulated_files(tmp_path):
    runner.run_task('simulate_dataset', user_config=simulate_config, out_dir=str(tmp_path / 'sim'), environ={})
    return {name: str(tmp_path / 'sim' / name) for name in ('observations.csv', 'covariates.csv', 'schema.txt',
                                                           'truth.csv', 'manifest.json')}


@pytest.fixture
def fitted(tmp_path, simulated_files):
    paths = {'observations': simulated_files['observations.csv'], 'covariates': simulated_files['covariates.csv'],
             'schema': simulated_files['schema.txt']}
    task = runner.run_task('fit_chain', paths=paths, user_config=fit_config, out_dir=str(tmp_path / 'fit'),
                           environ={})
    return task, str(tmp_path / 'fit')


def test_merge_config_precedence():
    config = runner.merge_config({'seed': 0, 'n_iter': 10, 'max_workers': 4}, {'seed': 1, 'n_iter': 20},
                                 {'n_iter': 30, 'thin': None}, {'EDP_SEED': '9', 'EDP_THREADS': '2'})
    assert config == {'seed': 9, 'n_iter': 30, 'max_workers': 2}


def test_environment_override_must_parse():
    with pytest.raises(ConfigError) as e:
        runner.merge_config({}, environ={'EDP_SEED': 'abc'})
    assert e.value.code == 'CONFIG_INVALID'


def test_every_task_definition_loads():
    for task_id in runner.TASK_IDS:
        definition = runner.load_definition(task_id)
        assert definition['info']['id'] == task_id
        assert runner.import_task(task_id, definition['transform']['task']) is not None
    with pytest.raises(ConfigError):
        runner.load_definition('model_tou')


def test_required_extract_missing(tmp_path):
    with pytest.raises(ConfigError) as e:
        runner.run_task('summarize_clusters', paths={'traces': 'x.csv'}, out_dir=str(tmp_path), environ={})
    assert e.value.context['key'] == 'partitions'
    with pytest.raises(DataError) as e:
        runner.run_task('summarize_clusters', paths={'traces': 'x.csv', 'partitions': 'y.csv'},
                        out_dir=str(tmp_path), environ={})
    assert e.value.code == 'IO'


def test_simulate_dataset(simulated_files):
    truth = pd.read_csv(simulated_files['truth.csv'])
    assert len(truth) == 20 and truth['subject_id'].iloc[0] == 'S00001'
    manifest = json.load(open(simulated_files['manifest.json']))
    assert manifest['command'] == 'simulate' and manifest['seed'] == 4
    assert manifest['config']['structure'] == 'CLUSTERED'


def test_simulate_report(tmp_path, metric_send):
    runner.run_task('simulate_dataset', user_config=simulate_config, out_dir=str(tmp_path), environ={}, report=True,
                    default_tags=['command:simulate'])
    metrics = {m['metric']: m for m in metric_send.call_args[0][0]}
    assert metrics['edp.simulate.subjects']['points'][1] == 20
    assert 'structure:clustered' in metrics['edp.simulate.subjects']['tags']


def test_fit_chain_outputs(fitted, metric_send):
    task, out_dir = fitted
    traces = pd.read_csv(os.path.join(out_dir, 'traces.csv'))
    assert traces['iteration'].tolist() == list(range(5, 11))
    partitions = pd.read_csv(os.path.join(out_dir, 'partitions.csv'))
    assert len(partitions) == 6 * 20
    manifest = json.load(open(os.path.join(out_dir, 'manifest.json')))
    assert manifest['seed'] == 3 and manifest['n_retained'] == 6
    assert sorted(manifest['inputs']) == ['covariates', 'observations', 'schema']

    task.report(['command:fit'])
    names = [m['metric'] for m in metric_send.call_args[0][0]]
    assert 'edp.fit.n_theta_median' in names and 'edp.fit.runtime_seconds' in names


def test_impute_replays_the_fit(tmp_path, fitted):
    _, fit_dir = fitted
    manifest = os.path.join(fit_dir, 'manifest.json')
    first = runner.run_task('impute_targets', paths={'manifest': manifest}, flags={'n_imputations': 3},
                            out_dir=str(tmp_path / 'imp1'), environ={})
    second = runner.run_task('impute_targets', paths={'manifest': manifest}, flags={'n_imputations': 3},
                             out_dir=str(tmp_path / 'imp2'), environ={})
    assert first.fit.sampler_config.prediction_schedule == (6, 8, 10)
    recorded = pd.read_csv(os.path.join(fit_dir, 'traces.csv'))
    assert np.allclose([t.log_likelihood for t in first.fit.result.traces], recorded['loglik'], rtol=1e-12)

    frame = pd.read_csv(str(tmp_path / 'imp1' / 'imputations.csv'))
    assert len(frame) == 3 * 20 and set(frame['target_time']) == {0.75}
    assert frame.equals(pd.read_csv(str(tmp_path / 'imp2' / 'imputations.csv')))
    assert second.imputations.is_complete()


def test_impute_with_targets_file(tmp_path, fitted):
    _, fit_dir = fitted
    targets = tmp_path / 'targets.csv'
    targets.write_text('subject_id,target_time\nS00002,0.5\nS00007,0.25\n')
    task = runner.run_task('impute_targets', paths={'manifest': os.path.join(fit_dir, 'manifest.json'),
                                                    'targets': str(targets)},
                           flags={'n_imputations': 2}, out_dir=str(tmp_path / 'imp'), environ={})
    assert [(t.subject_id, t.target_time) for t in task.targets] == [('S00002', 0.5), ('S00007', 0.25)]


def test_impute_refuses_changed_inputs(tmp_path, fitted, simulated_files):
    _, fit_dir = fitted
    with open(simulated_files['observations.csv'], 'a') as handle:
        handle.write('S00001,0.99,1.0\n')
    with pytest.raises(DataError) as e:
        runner.run_task('impute_targets', paths={'manifest': os.path.join(fit_dir, 'manifest.json')},
                        flags={'n_imputations': 2}, out_dir=str(tmp_path / 'imp'), environ={})
    assert e.value.code == 'IO'


def test_summarize_clusters(tmp_path, fitted, metric_send):
    _, fit_dir = fitted
    paths = {'partitions': os.path.join(fit_dir, 'partitions.csv'), 'traces': os.path.join(fit_dir, 'traces.csv')}
    task = runner.run_task('summarize_clusters', paths=paths, flags={'level': 'psi'}, out_dir=str(tmp_path / 'sum'),
                           environ={}, report=True, default_tags=['command:summarize-clusters'])
    labels = pd.read_csv(str(tmp_path / 'sum' / 'labels.csv'))
    assert labels.columns.tolist() == ['subject_id', 'cluster_label']
    assert len(labels) == 20 and labels['cluster_label'].iloc[0] == 1
    manifest = json.load(open(str(tmp_path / 'sum' / 'manifest.json')))
    assert manifest['n_clusters'] == int(task.labels.max())
    assert metric_send.call_args[0][0][0]['tags'] == ['command:summarize-clusters', 'level:psi']

    with pytest.raises(ConfigError):
        runner.run_task('summarize_clusters', paths=paths, flags={'level': 'omega'}, out_dir=str(tmp_path), environ={})


def test_summarize_rejects_mismatched_trace(tmp_path, fitted):
    _, fit_dir = fitted
    traces = pd.read_csv(os.path.join(fit_dir, 'traces.csv')).iloc[:-1]
    traces.to_csv(str(tmp_path / 'short.csv'), index=False)
    with pytest.raises(DataError) as e:
        runner.run_task('summarize_clusters', paths={'partitions': os.path.join(fit_dir, 'partitions.csv'),
                                                     'traces': str(tmp_path / 'short.csv')},
                        out_dir=str(tmp_path), environ={})
    assert e.value.code == 'LENGTH_MISMATCH'


def write_imputations(tmp_path, values):
    rows = ['imputation_index,subject_id,target_time,value']
    rows += ['{},{},1.0,{}'.format(m, sid, value) for m, column in enumerate(values)
             for sid, value in zip('abcd', column)]
    path = tmp_path / 'imputations.csv'
    path.write_text('\n'.join(rows) + '\n')
    return str(path)


def test_combine_imputations(tmp_path, metric_send):
    imputations = write_imputations(tmp_path, [[7.0, 1.0, 1.0, 1.0], [7.0, 7.0, 1.0, 1.0]])
    events = tmp_path / 'events.csv'
    events.write_text('subject_id,event,person_time\na,0,10\nb,0,10\nc,1,10\nd,0,10\n')
    task = runner.run_task('combine_imputations', paths={'imputations': imputations, 'events': str(events)},
                           out_dir=str(tmp_path / 'out'), environ={}, report=True, default_tags=['command:combine'])
    assert task.counts['events'].tolist() == [2, 3]
    pooled = json.load(open(str(tmp_path / 'out' / 'pooled.json')))
    assert set(pooled) == {'estimate', 'total_variance', 'ci_low', 'ci_high', 'n_imputations'}
    estimate = (2 * 3) ** 0.5 / 40.0
    log_total = (1 / 2 + 1 / 3) / 2 + 1.5 * np.log(1.5) ** 2 / 2
    assert pooled['estimate'] == pytest.approx(estimate)
    assert pooled['total_variance'] == pytest.approx(estimate ** 2 * log_total)
    assert pooled['n_imputations'] == 2
    assert pooled['ci_low'] < pooled['estimate'] < pooled['ci_high']
    manifest = json.load(open(str(tmp_path / 'out' / 'manifest.json')))
    assert manifest['config']['person_time'] == 40.0 and manifest['config']['threshold'] == 6.5
    assert manifest['events_per_imputation'] == [2, 3]
    assert manifest['log_rate']['total_variance'] == pytest.approx(log_total)
    assert metric_send.call_args[0][0][0]['metric'] == 'edp.combine.incidence'


def test_combine_counts_observed_values(tmp_path):
    imputations = write_imputations(tmp_path, [[7.0, 1.0, 1.0, 1.0], [1.0, 7.0, 1.0, 1.0]])
    observations = tmp_path / 'observations.csv'
    observations.write_text('subject_id,time,y\nd,0.1,9.0\nd,0.2,1.0\n')
    task = runner.run_task('combine_imputations', paths={'imputations': imputations,
                                                         'observations': str(observations)},
                           flags={'person_time': 12.5, 'threshold': 5.0}, out_dir=str(tmp_path), environ={})
    assert task.counts['events'].tolist() == [2, 2]
    assert task.result.estimate == pytest.approx(2 / 12.5)


def test_combine_needs_person_time(tmp_path):
    imputations = write_imputations(tmp_path, [[7.0, 1.0, 1.0, 1.0], [7.0, 7.0, 1.0, 1.0]])
    with pytest.raises(ConfigError) as e:
        runner.run_task('combine_imputations', paths={'imputations': imputations}, out_dir=str(tmp_path),
                        environ={})
    assert e.value.context['key'] == 'person_time'


def write_lab_fixture(directory, rng, incidence, n=300, n_imputations=10, threshold=6.5, sd=0.8):
    """ one lab per subject, exceeding the threshold with probability incidence * person_time; 40% unmeasured """
    directory.mkdir()
    ids = ['P{:04d}'.format(i) for i in range(n)]
    person_time = rng.uniform(0.5, 1.5, size=n)
    means = threshold + sd * stats.norm.ppf(incidence * person_time)
    labs = rng.normal(means, sd)
    missing = rng.random(n) < 0.4

    pd.DataFrame({'subject_id': ids, 'event': 0, 'person_time': person_time}).to_csv(
        str(directory / 'events.csv'), index=False)
    pd.DataFrame({'subject_id': np.array(ids)[~missing], 'time': 1.0, 'y': labs[~missing]}).to_csv(
        str(directory / 'observations.csv'), index=False)
    rows = [(m, ids[i], 1.0, rng.normal(means[i], sd)) for m in range(n_imputations) for i in np.flatnonzero(missing)]
    pd.DataFrame(rows, columns=['imputation_index', 'subject_id', 'target_time', 'value']).to_csv(
        str(directory / 'imputations.csv'), index=False)
    return {name: str(directory / '{}.csv'.format(name)) for name in ('imputations', 'events', 'observations')}


def test_combined_interval_covers_known_incidence(tmp_path):
    rng = np.random.default_rng(2024)
    covered = 0
    for replicate in range(20):
        paths = write_lab_fixture(tmp_path / 'rep{}'.format(replicate), rng, incidence=0.15)
        out_dir = tmp_path / 'rep{}'.format(replicate) / 'out'
        runner.run_task('combine_imputations', paths=paths, out_dir=str(out_dir), environ={})
        pooled = json.load(open(str(out_dir / 'pooled.json')))
        covered += pooled['ci_low'] <= 0.15 <= pooled['ci_high']
    assert covered >= 16


def test_run_study(tmp_path, metric_send):
    config = {'n': 10, 'n_datasets': 1, 'sigma2_values': [1.0], 'sigma2_u_values': [0.15], 'methods': ['SINGLE'],
              'n_iter': 4, 'n_burnin': 2, 'n_predictions': 2, 'spline_kind': 'BSPLINE', 'n_knots': 2}
    runner.run_task('run_study', user_config=config, out_dir=str(tmp_path), environ={'EDP_THREADS': '1'},
                    report=True, default_tags=['command:study'])
    summary = pd.read_csv(str(tmp_path / 'study_summary.csv'))
    assert summary['method'].tolist() == ['SINGLE']
    manifest = json.load(open(str(tmp_path / 'manifest.json')))
    assert manifest['config']['max_workers'] == 1
    assert len(manifest['replicate_seeds']) == 1
    assert {m['metric'] for m in metric_send.call_args[0][0]} == {'edp.study.l1_mean', 'edp.study.l2_mean'}
