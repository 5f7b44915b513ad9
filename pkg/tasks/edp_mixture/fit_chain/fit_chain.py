import logging
import os
import sys
import time

import numpy as np
from datadog import api

from tasks.edp_mixture.lib import cluster_summary, files
from tasks.edp_mixture.lib.core_types import Priors, SamplerConfig, coerce_value
from tasks.edp_mixture.lib.sampler import GibbsSampler
from tasks.edp_mixture.lib.splines import SplineSpec

logging.basicConfig(
    format='[%(asctime)s] [%(levelname)s] {%(filename)s:%(lineno)d}: %(message)s',
    stream=sys.stdout,
    level=logging.INFO,
)

log = logging.getLogger(__name__)

INPUTS = ('observations', 'covariates', 'schema')


class FitChain:
    """Run one Gibbs chain and write its trace, retained partitions and final state."""

    def __init__(self, **kwargs):
        self.extracts = kwargs.get('extracts', {})
        self.out_dir = kwargs.get('out_dir', '.')
        self.config = {k: v for k, v in kwargs.items() if k not in ('extracts', 'out_dir')}
        self.time_scale = coerce_value('time_scale', self.config.get('time_scale', 1.0), float)
        self.dataset = None
        self.spline_spec = None
        self.priors = None
        self.sampler_config = None
        self.result = None

    def prepare(self):
        self.dataset = files.load_dataset(self.extracts['observations'], self.extracts['covariates'],
                                          self.extracts['schema'], time_scale=self.time_scale)
        self.spline_spec = SplineSpec.from_config(self.config, self.dataset.all_times())
        self.priors = Priors.from_config(self.config)
        self.sampler_config = SamplerConfig.from_config(self.config)
        return self

    def fit(self, targets=None):
        sampler = GibbsSampler(self.dataset, self.spline_spec, self.priors, self.sampler_config)
        self.result = sampler.run(targets=targets)
        return self.result

    def run(self):
        self.prepare()
        self.fit()
        paths = {'traces': os.path.join(self.out_dir, 'traces.csv'),
                 'partitions': os.path.join(self.out_dir, 'partitions.csv'),
                 'state': os.path.join(self.out_dir, 'state.joblib')}
        files.write_traces(self.result.traces, paths['traces'])
        files.write_partitions(self.result.traces, self.dataset.subject_ids(), paths['partitions'])
        files.save_state(self.result.state, paths['state'])

        files.write_manifest(self.out_dir, 'fit', inputs={name: self.extracts[name] for name in INPUTS},
                             config=self.config, seed=self.sampler_config.seed,
                             outputs=[os.path.basename(p) for p in paths.values()],
                             extra={'n_retained': len(self.result.traces),
                                    'alpha_psi_acceptance': self.result.alpha_psi_acceptance})
        return paths

    def report(self, default_tags):
        now = time.time()
        traces = self.result.traces
        tags = default_tags + ['mode:{}'.format(self.sampler_config.mode.value.lower())]
        values = {'runtime_seconds': self.result.runtime_seconds,
                  'alpha_psi_acceptance': self.result.alpha_psi_acceptance}
        if traces:
            values['n_theta_median'] = cluster_summary.posterior_num_clusters(traces)
            values['alpha_theta_mean'] = float(np.mean([t.alpha_theta for t in traces]))
            values['alpha_psi_mean'] = float(np.mean([t.alpha_psi for t in traces]))
        metrics = [{'metric': 'edp.fit.{}'.format(name), 'points': (now, value), 'tags': tags}
                   for name, value in sorted(values.items()) if np.isfinite(value)]
        api.Metric.send(metrics)
