import logging
import os
import sys
import time

from datadog import api

from tasks.edp_mixture.lib import files, predict
from tasks.edp_mixture.lib.core_types import coerce_value
from tasks.edp_mixture.lib.errors import ConfigError

logging.basicConfig(
    format='[%(asctime)s] [%(levelname)s] {%(filename)s:%(lineno)d}: %(message)s',
    stream=sys.stdout,
    level=logging.INFO,
)

log = logging.getLogger(__name__)


class CombineImputations:
    """Threshold each completed dataset into event indicators and pool the incidence rate over imputations."""

    def __init__(self, **kwargs):
        self.extracts = kwargs.get('extracts', {})
        self.out_dir = kwargs.get('out_dir', '.')
        self.threshold = coerce_value('threshold', kwargs.get('threshold'), float)
        self.level = coerce_value('level', kwargs.get('level', 0.95), float)
        self.person_time = kwargs.get('person_time')
        self.config = {'threshold': self.threshold, 'level': self.level, 'person_time': self.person_time}
        self.counts = None
        self.result = None

    def observed_values(self):
        if 'observations' not in self.extracts:
            return {}
        observations = files.read_observations(self.extracts['observations'])
        return {sid: group['y'].to_numpy() for sid, group in observations.groupby('subject_id', sort=False)}

    def recorded_events(self):
        if 'events' not in self.extracts:
            return {}, None
        events = files.read_events(self.extracts['events'])
        return dict(zip(events['subject_id'], events['event'].astype(int))), float(events['person_time'].sum())

    def resolve_person_time(self, from_events):
        if self.person_time is not None:
            return coerce_value('person_time', self.person_time, float)
        if from_events is None:
            raise ConfigError('CONFIG_INVALID', 'person_time must be configured when no events file is given',
                              key='person_time')
        return from_events

    def run(self):
        imputations = predict.ImputationSet.from_frame(files.read_imputations(self.extracts['imputations']))
        events, events_person_time = self.recorded_events()
        person_time = self.resolve_person_time(events_person_time)

        outcomes = predict.classify_threshold(imputations, self.threshold, observed=self.observed_values(),
                                              events=events)
        self.counts = outcomes.groupby('imputation_index', sort=True)['outcome'].sum().rename('events').reset_index()
        self.result = predict.incidence_rate(self.counts['events'].to_numpy(), person_time, self.level)
        self.counts['rate'] = self.result.rates
        log.info('pooled incidence %.4f (%.4f, %.4f) over %s imputations', self.result.estimate,
                 self.result.ci_low, self.result.ci_high, len(self.counts))

        paths = {'counts': os.path.join(self.out_dir, 'outcome_counts.csv'),
                 'pooled': os.path.join(self.out_dir, 'pooled.json')}
        self.counts.to_csv(paths['counts'], index=False)
        files.write_json(pooled_record(self.result), paths['pooled'])

        pooled = self.result.log_scale
        self.config['person_time'] = person_time
        log_rate = {'estimate': pooled.estimate, 'within_variance': pooled.within_variance,
                    'between_variance': pooled.between_variance, 'total_variance': pooled.total_variance,
                    'df': pooled.df}
        files.write_manifest(self.out_dir, 'combine', inputs=self.extracts, config=self.config, seed=None,
                             outputs=[os.path.basename(p) for p in paths.values()],
                             extra={'log_rate': log_rate, 'events_per_imputation': self.counts['events'].tolist()})
        return paths

    def report(self, default_tags):
        now = time.time()
        tags = default_tags + ['threshold:{:g}'.format(self.threshold)]
        metrics = [{'metric': 'edp.combine.{}'.format(name), 'points': (now, value), 'tags': tags}
                   for name, value in (('incidence', self.result.estimate), ('incidence_ci_low', self.result.ci_low),
                                       ('incidence_ci_high', self.result.ci_high),
                                       ('mean_events', float(self.counts['events'].mean())))]
        api.Metric.send(metrics)


def pooled_record(result):
    """The pooled-results record: rate estimate, its delta-method variance, interval and imputation count."""
    return {'estimate': result.estimate, 'total_variance': result.total_variance, 'ci_low': result.ci_low,
            'ci_high': result.ci_high, 'n_imputations': result.log_scale.n_imputations}
