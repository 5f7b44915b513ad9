import logging
import os
import sys
import time

from datadog import api

from tasks.edp_mixture.fit_chain.fit_chain import INPUTS, FitChain
from tasks.edp_mixture.lib import files, predict
from tasks.edp_mixture.lib.core_types import coerce_value
from tasks.edp_mixture.lib.errors import DataError

logging.basicConfig(
    format='[%(asctime)s] [%(levelname)s] {%(filename)s:%(lineno)d}: %(message)s',
    stream=sys.stdout,
    level=logging.INFO,
)

log = logging.getLogger(__name__)

SCHEDULE_KEYS = ('prediction_schedule', 'n_imputations')


class ImputeTargets:
    """Replay the chain recorded in a fit manifest and draw predictive values at the scheduled iterations.

    Prediction draws come from their own random stream, so the replayed chain
    matches the original fit exactly.
    """

    def __init__(self, **kwargs):
        self.extracts = kwargs.get('extracts', {})
        self.out_dir = kwargs.get('out_dir', '.')
        self.config = {k: v for k, v in kwargs.items() if k not in ('extracts', 'out_dir')}
        self.fit = None
        self.targets = None
        self.imputations = None

    def chain_config(self, manifest):
        config = {k: v for k, v in manifest['config'].items() if k not in SCHEDULE_KEYS}
        for key in SCHEDULE_KEYS:
            if self.config.get(key) is not None:
                config[key] = self.config[key]
        if self.config.get('time_scale') is not None:
            config['time_scale'] = self.config['time_scale']
        config['seed'] = manifest['seed']
        return config

    @staticmethod
    def check_inputs(manifest):
        for name in INPUTS:
            recorded = manifest['inputs'][name]
            if files.sha256_file(recorded['path']) != recorded['sha256']:
                raise DataError('IO', 'input {!r} changed since the fit'.format(name), path=recorded['path'])
        return {name: manifest['inputs'][name]['path'] for name in INPUTS}

    def build_targets(self, dataset, time_scale):
        if 'targets' in self.extracts:
            target_times = files.read_targets(self.extracts['targets'], time_scale)
        else:
            target_times = coerce_value('target_time', self.config.get('target_time'), float) / time_scale
        return predict.build_targets(dataset, target_times)

    def run(self):
        manifest = files.read_json(self.extracts['manifest'])
        inputs = self.check_inputs(manifest)
        self.fit = FitChain(extracts=inputs, out_dir=self.out_dir, **self.chain_config(manifest)).prepare()
        self.targets = self.build_targets(self.fit.dataset, self.fit.time_scale)
        log.info('imputing %s targets at %s scheduled iterations', len(self.targets),
                 len(self.fit.sampler_config.prediction_schedule))

        self.imputations = self.fit.fit(targets=self.targets).imputations
        frame = self.imputations.to_frame()
        frame['target_time'] = frame['target_time'] * self.fit.time_scale
        path = os.path.join(self.out_dir, 'imputations.csv')
        frame.to_csv(path, index=False)

        files.write_manifest(self.out_dir, 'impute', inputs=dict(inputs, fit_manifest=self.extracts['manifest'],
                                                                 targets=self.extracts.get('targets')),
                             config=self.fit.config, seed=self.fit.sampler_config.seed,
                             outputs=[os.path.basename(path)],
                             extra={'prediction_schedule': list(self.fit.sampler_config.prediction_schedule)})
        return {'imputations': path}

    def report(self, default_tags):
        now = time.time()
        new_subjects = sum(t.mode is predict.TargetMode.NEW_SUBJECT for t in self.targets)
        metrics = [{'metric': 'edp.impute.targets', 'points': (now, len(self.targets)), 'tags': default_tags},
                   {'metric': 'edp.impute.new_subject_targets', 'points': (now, new_subjects), 'tags': default_tags},
                   {'metric': 'edp.impute.draws', 'points': (now, len(self.imputations.schedule)),
                    'tags': default_tags}]
        api.Metric.send(metrics)
