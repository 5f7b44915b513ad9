import dataclasses
import logging
import os
import sys
import time

from datadog import api

from tasks.edp_mixture.lib import files, simulate

logging.basicConfig(
    format='[%(asctime)s] [%(levelname)s] {%(filename)s:%(lineno)d}: %(message)s',
    stream=sys.stdout,
    level=logging.INFO,
)

log = logging.getLogger(__name__)


class RunStudy:
    """Prediction-error comparison of EDP, DP and single-cluster fits over simulated scenarios."""

    def __init__(self, **kwargs):
        self.out_dir = kwargs.get('out_dir', '.')
        self.study = simulate.StudyConfig.from_config(kwargs)
        self.summary = None
        self.replicates = None

    def run(self):
        self.summary, self.replicates = simulate.run_study(self.study)
        paths = {'summary': os.path.join(self.out_dir, 'study_summary.csv'),
                 'replicates': os.path.join(self.out_dir, 'study_replicates.csv')}
        self.summary.to_csv(paths['summary'], index=False)
        self.replicates.to_csv(paths['replicates'], index=False)

        config = dataclasses.asdict(self.study)
        files.write_manifest(self.out_dir, 'study', inputs={}, config=config, seed=self.study.seed,
                             outputs=[os.path.basename(p) for p in paths.values()],
                             extra={'replicate_seeds': self.replicates[['scenario', 'replicate', 'data_seed',
                                                                        'fit_seed']].drop_duplicates()
                                    .to_dict(orient='records')})
        return paths

    def report(self, default_tags):
        now = time.time()
        metrics = []
        for row in self.summary.itertuples(index=False):
            tags = default_tags + ['scenario:{}'.format(row.scenario), 'method:{}'.format(row.method.lower())]
            metrics += [{'metric': 'edp.study.l1_mean', 'points': (now, row.l1_mean), 'tags': tags},
                        {'metric': 'edp.study.l2_mean', 'points': (now, row.l2_mean), 'tags': tags}]
        api.Metric.send(metrics)
