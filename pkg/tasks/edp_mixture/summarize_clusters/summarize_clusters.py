import logging
import os
import sys
import time

import numpy as np
from datadog import api

from tasks.edp_mixture.lib import cluster_summary, files
from tasks.edp_mixture.lib.errors import ConfigError, DataError

logging.basicConfig(
    format='[%(asctime)s] [%(levelname)s] {%(filename)s:%(lineno)d}: %(message)s',
    stream=sys.stdout,
    level=logging.INFO,
)

log = logging.getLogger(__name__)

COUNT_COLUMNS = {'theta': 'n_theta', 'psi': 'n_psi'}


class SummarizeClusters:
    """Collapse the retained partitions of a fit into one labelling of the subjects."""

    def __init__(self, **kwargs):
        self.extracts = kwargs.get('extracts', {})
        self.out_dir = kwargs.get('out_dir', '.')
        self.level = str(kwargs.get('level', 'theta')).lower()
        if self.level not in COUNT_COLUMNS:
            raise ConfigError('CONFIG_INVALID', 'level must be theta or psi, got {!r}'.format(self.level),
                              key='level')
        self.labels = None

    def run(self):
        subject_ids, iterations, snapshots = files.read_partitions(self.extracts['partitions'])
        traces = files.read_traces(self.extracts['traces'])
        if not iterations or traces.empty:
            raise DataError('EMPTY_TRACE', 'no retained iterations to summarise', path=self.extracts['traces'])
        if traces['iteration'].tolist() != iterations:
            raise DataError('LENGTH_MISMATCH', 'trace has {} retained iterations, partitions have {}'.format(
                len(traces), len(iterations)), path=self.extracts['traces'])

        counts = traces[COUNT_COLUMNS[self.level]].tolist()
        self.labels = cluster_summary.summarize(snapshots, counts, level=self.level)
        path = os.path.join(self.out_dir, 'labels.csv')
        files.write_labels(subject_ids, self.labels, path)

        sizes = {int(label): int(size) for label, size in zip(*np.unique(self.labels, return_counts=True))}
        files.write_manifest(self.out_dir, 'summarize-clusters', inputs=self.extracts, config={'level': self.level},
                             seed=None, outputs=[os.path.basename(path)],
                             extra={'n_clusters': len(sizes), 'cluster_sizes': sizes})
        return {'labels': path}

    def report(self, default_tags):
        now = time.time()
        tags = default_tags + ['level:{}'.format(self.level)]
        metrics = [{'metric': 'edp.summary.clusters', 'points': (now, int(self.labels.max())), 'tags': tags},
                   {'metric': 'edp.summary.subjects', 'points': (now, int(self.labels.size)), 'tags': tags}]
        api.Metric.send(metrics)
