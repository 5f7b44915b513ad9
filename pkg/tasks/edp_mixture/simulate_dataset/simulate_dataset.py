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


class SimulateDataset:
    """Write one synthetic dataset (observations, covariates, schema) plus the per-subject truth."""

    def __init__(self, **kwargs):
        self.out_dir = kwargs.get('out_dir', '.')
        self.dgp = simulate.DgpConfig.from_config(kwargs)
        self.dataset = None
        self.truth = None

    def run(self):
        self.dataset, self.truth = simulate.generate_dataset(self.dgp)
        paths = files.write_dataset(self.dataset, self.out_dir)
        paths['truth'] = os.path.join(self.out_dir, 'truth.csv')
        self.truth.to_frame().to_csv(paths['truth'], index=False)

        files.write_manifest(self.out_dir, 'simulate', inputs={}, config=dataclasses.asdict(self.dgp),
                             seed=self.dgp.seed, outputs=[os.path.basename(p) for p in paths.values()])
        log.info('wrote %s', ', '.join(sorted(paths.values())))
        return paths

    def report(self, default_tags):
        now = time.time()
        tags = default_tags + ['structure:{}'.format(self.dgp.structure.value.lower())]
        metrics = [{'metric': 'edp.simulate.subjects', 'points': (now, self.dataset.n), 'tags': tags},
                   {'metric': 'edp.simulate.observations', 'points': (now, self.dataset.N), 'tags': tags}]
        api.Metric.send(metrics)
