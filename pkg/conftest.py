import logging
import os
from unittest.mock import patch

import numpy as np
import pytest

from tasks.edp_mixture.lib import files
from tasks.edp_mixture.lib.core_types import (ColumnKind, CovariateSchema, LongitudinalDataset, Priors,
                                              SamplerConfig, SubjectRecord, validate_dataset)
from tasks.edp_mixture.lib.simulate import DgpConfig, generate_dataset
from tasks.edp_mixture.lib.splines import SplineKind, SplineSpec


def quiet_numeric_logs():
    """ keep sampler progress out of the test output """
    logging.getLogger('tasks.edp_mixture.lib.sampler').setLevel(logging.WARN)


def pytest_collection_modifyitems(config, items):
    if os.environ.get('EDP_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='set EDP_RUN_SLOW=1 to run acceptance-scale tests')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture(scope="session")
def priors():
    return Priors()


@pytest.fixture(scope="session")
def two_column_schema():
    return CovariateSchema.from_pairs([('smoker', ColumnKind.BINARY), ('bmi', ColumnKind.CONTINUOUS)])


@pytest.fixture
def tiny_dataset(two_column_schema):
    """ five subjects, one without outcomes """
    subjects = [
        SubjectRecord(id='a', x=[1.0, 0.2], t=[0.1, 0.4, 0.9], y=[1.0, 1.3, 2.1]),
        SubjectRecord(id='b', x=[0.0, -0.5], t=[0.2, 0.6], y=[0.1, 0.4]),
        SubjectRecord(id='c', x=[1.0, 1.1], t=[0.05, 0.5, 0.7, 0.95], y=[2.0, 2.6, 2.9, 3.3]),
        SubjectRecord(id='d', x=[0.0, 0.0], t=[0.3], y=[0.7]),
        SubjectRecord(id='e', x=[1.0, -1.2], t=[], y=[]),
    ]
    return validate_dataset(LongitudinalDataset(schema=two_column_schema, subjects=subjects))


@pytest.fixture
def tiny_files(tmp_path, tiny_dataset):
    return files.write_dataset(tiny_dataset, str(tmp_path / 'data'))


@pytest.fixture(scope="session")
def simulated():
    quiet_numeric_logs()
    return generate_dataset(DgpConfig(n=30, seed=11, max_obs=4))


@pytest.fixture
def no_spline():
    return SplineSpec(kind=SplineKind.NONE)


@pytest.fixture
def short_config():
    quiet_numeric_logs()
    return SamplerConfig(n_iter=12, n_burnin=4, m_aux=2, seed=3, log_every=0)


@pytest.fixture
def metric_send():
    with patch('datadog.api.Metric.send') as send:
        yield send
