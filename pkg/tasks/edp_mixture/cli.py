"""Command-line entry point: ``python -m tasks.edp_mixture.cli <command> ...``.

Each command runs one task from ``tasks/edp_mixture/<task_id>/``. Exit status is
0 on success, 2 for configuration errors, 3 for data errors and 4 for numerical
or unexpected failures.
"""

import argparse
import logging
import os
import sys

import datadog

from tasks.edp_mixture import __version__, runner
from tasks.edp_mixture.lib import files
from tasks.edp_mixture.lib.errors import EdpError

log = logging.getLogger(__name__)

COMMANDS = {
    'simulate': 'simulate_dataset',
    'fit': 'fit_chain',
    'impute': 'impute_targets',
    'combine': 'combine_imputations',
    'summarize-clusters': 'summarize_clusters',
    'study': 'run_study',
}
INPUT_FLAGS = {
    'fit': ('observations', 'covariates', 'schema'),
    'impute': ('manifest', 'targets'),
    'combine': ('imputations', 'events', 'observations'),
    'summarize-clusters': ('partitions', 'traces'),
}


def build_parser():
    parser = argparse.ArgumentParser(prog='edp', description='Enriched Dirichlet process mixtures of linear mixed '
                                                             'models for longitudinal outcomes.')
    parser.add_argument('--version', action='version', version='%(prog)s {}'.format(__version__))
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    subparsers.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='flat YAML or key = value configuration file')
    common.add_argument('--out-dir', default='.', help='directory for outputs and manifest.json')
    common.add_argument('--report', action='store_true', help='send run metrics to datadog')
    common.add_argument('--verbose', action='store_true', help='log at DEBUG level')

    simulate = subparsers.add_parser('simulate', parents=[common], help='write a synthetic dataset and its truth')
    simulate.add_argument('--seed', type=int)

    fit = subparsers.add_parser('fit', parents=[common], help='run the Gibbs sampler on a dataset')
    fit.add_argument('--observations', required=True, help='CSV with subject_id,time,y')
    fit.add_argument('--covariates', required=True, help='CSV with subject_id and one column per covariate')
    fit.add_argument('--schema', required=True, help='lines <name>:binary|continuous')
    fit.add_argument('--time-scale', type=float, help='divide times by this value at ingestion, e.g. 365')
    fit.add_argument('--seed', type=int)

    impute = subparsers.add_parser('impute', parents=[common], help='replay a fit and draw predictive values')
    impute.add_argument('--manifest', required=True, help='manifest.json written by fit')
    impute.add_argument('--targets', help='CSV with subject_id,target_time; default: every subject at --target-time')
    impute.add_argument('--target-time', type=float)
    impute.add_argument('--n-imputations', type=int)
    impute.add_argument('--time-scale', type=float)

    combine = subparsers.add_parser('combine', parents=[common], help='pool threshold incidence over imputations')
    combine.add_argument('--imputations', required=True)
    combine.add_argument('--events', help='CSV with subject_id,event,person_time')
    combine.add_argument('--observations', help='observed outcomes counted against the threshold')
    combine.add_argument('--threshold', type=float)
    combine.add_argument('--person-time', type=float)
    combine.add_argument('--level', type=float)

    summarize = subparsers.add_parser('summarize-clusters', parents=[common],
                                      help='one clustering from the retained partitions')
    summarize.add_argument('--partitions', required=True)
    summarize.add_argument('--traces', required=True)
    summarize.add_argument('--level', choices=('theta', 'psi'))

    study = subparsers.add_parser('study', parents=[common], help='simulation study comparing EDP, DP and SINGLE')
    study.add_argument('--seed', type=int)
    return parser


def flag_config(args):
    """Configuration values given as flags; inputs, output and logging flags are not configuration."""
    skip = {'command', 'config', 'out_dir', 'report', 'verbose'} | set(INPUT_FLAGS.get(args.command, ()))
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


def configure_logging(verbose):
    logging.basicConfig(
        format='[%(asctime)s] [%(levelname)s] {%(filename)s:%(lineno)d}: %(message)s',
        stream=sys.stdout,
        level=logging.DEBUG if verbose else logging.INFO,
    )
    logging.getLogger().setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None, environ=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    task_id = COMMANDS[args.command]
    paths = {name: getattr(args, name) for name in INPUT_FLAGS.get(args.command, ())}

    try:
        if args.report:
            datadog.initialize(api_key=os.environ.get('DATADOG_API_KEY'), app_key=os.environ.get('DATADOG_APP_KEY'))
        runner.run_task(task_id, paths=paths, user_config=files.load_config(args.config), flags=flag_config(args),
                        out_dir=args.out_dir, environ=environ, report=args.report,
                        default_tags=['command:{}'.format(args.command)])
    except EdpError as e:
        log.error(e.render())
        return e.exit_code
    except Exception as e:
        log.exception(e)
        return 4
    return 0


if __name__ == '__main__':
    sys.exit(main())
