"""Load a task's canal.yaml, merge its configuration and run the task class it names."""

import importlib
import logging
import os

import yaml

from tasks.edp_mixture.lib.core_types import coerce_value
from tasks.edp_mixture.lib.errors import ConfigError, DataError

log = logging.getLogger(__name__)

TASKS_DIR = os.path.dirname(os.path.abspath(__file__))
TASK_IDS = ('simulate_dataset', 'fit_chain', 'impute_targets', 'combine_imputations', 'summarize_clusters',
            'run_study')
ENVIRONMENT_OVERRIDES = {'EDP_SEED': ('seed', int), 'EDP_THREADS': ('max_workers', int)}


def load_definition(task_id):
    if task_id not in TASK_IDS:
        raise ConfigError('CONFIG_INVALID', 'unknown task {!r}'.format(task_id))
    path = os.path.join(TASKS_DIR, task_id, 'canal.yaml')
    with open(path) as handle:
        definition = yaml.safe_load(handle)
    definition.setdefault('extract', [])
    definition.setdefault('config', {})
    return definition


def merge_config(defaults, user=None, flags=None, environ=None):
    """canal.yaml defaults < user config file < CLI flags < EDP_SEED / EDP_THREADS."""
    config = dict(defaults or {})
    config.update(user or {})
    config.update({k: v for k, v in (flags or {}).items() if v is not None})
    environ = os.environ if environ is None else environ
    for variable, (key, kind) in ENVIRONMENT_OVERRIDES.items():
        if environ.get(variable):
            config[key] = coerce_value(variable, environ[variable], kind)
            log.info('%s overrides %s=%s', variable, key, config[key])
    return config


def resolve_extracts(definition, paths):
    """Map extract ids to existing files; required extracts must be given."""
    resolved = {}
    for extract in definition['extract']:
        path = paths.get(extract['id'])
        if path is None:
            if extract.get('required', True):
                raise ConfigError('CONFIG_INVALID', 'task {} needs the {!r} input'.format(
                    definition['info']['id'], extract['id']), key=extract['id'])
            continue
        if not os.path.isfile(path):
            raise DataError('IO', 'input {!r} not found'.format(extract['id']), path=path)
        resolved[extract['id']] = path
    return resolved


def import_task(task_id, dotted):
    module_name, _, class_name = dotted.rpartition('.')
    module = importlib.import_module('tasks.edp_mixture.{}.{}'.format(task_id, module_name))
    return getattr(module, class_name)


def build_task(task_id, paths=None, user_config=None, flags=None, out_dir='.', environ=None):
    definition = load_definition(task_id)
    config = merge_config(definition['config'], user_config, flags, environ)
    extracts = resolve_extracts(definition, paths or {})
    task_class = import_task(task_id, definition['transform']['task'])
    os.makedirs(out_dir, exist_ok=True)
    log.info('running %s with inputs %s into %s', task_id, sorted(extracts), out_dir)
    return task_class(extracts=extracts, out_dir=out_dir, **config)


def run_task(task_id, paths=None, user_config=None, flags=None, out_dir='.', environ=None, report=False,
             default_tags=None):
    """Build, run and optionally report a task; returns the task so callers can inspect its results."""
    task = build_task(task_id, paths, user_config, flags, out_dir, environ)
    task.run()
    if report:
        task.report(default_tags or ['task:{}'.format(task_id)])
    return task
