# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Command-line entry point: wss3d <subcommand> [options].

Exit codes: 0 on success, 2 on a config error, 3 on a missing artifact.
"""

import argparse
import sys

from .config import ConfigError, load_config
from .logging import get_logger
from .pipeline import (MissingArtifactError, stage_evaluate,
                       stage_generate_data, stage_generate_pseudo, stage_plot,
                       stage_train_student, stage_train_teacher)
from .trends import SEEDS, TRENDS, reproduce_trends

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _common(parser):
  parser.add_argument('--config', default=None,
                      help='JSON (or YAML) experiment config.')
  parser.add_argument('--seed', type=int, default=None,
                      help='Master seed; overrides dataset.seed.')
  parser.add_argument('--out', default=None,
                      help='Run directory; overrides output_dir.')
  parser.add_argument('--stage-override', action='append', default=[],
                      metavar='KEY=VALUE',
                      help='Sets any config leaf, e.g. teacher.steps=50. '
                      'Repeatable.')


def _parse_reports(items):
  reports = {}
  for item in items:
    if '=' not in item:
      raise ConfigError('--report must look like name=path, got {!r}'.format(item))
    name, path = item.split('=', 1)
    reports[name] = path
  return reports


def _parse_seeds(text):
  try:
    seeds = tuple(int(s) for s in text.split(',') if s.strip())
  except ValueError:
    raise ConfigError('--seeds must be comma-separated integers, got {!r}'.format(
        text))
  if not seeds:
    raise ConfigError('--seeds must name at least one seed')
  return seeds


def build_parser():
  parser = argparse.ArgumentParser(
      prog='wss3d',
      description='Weakly semi-supervised 3D detection from point annotations.')
  sub = parser.add_subparsers(dest='command', required=True)

  _common(sub.add_parser('gen-data', help='Generate and split synthetic scenes.'))
  _common(sub.add_parser('train-teacher', help='Train the point-to-box teacher.'))
  p = sub.add_parser('gen-pseudo', help='Pseudo-label the weak split.')
  _common(p)
  p.add_argument('--checkpoint', default=None,
                 help='Teacher checkpoint; defaults to the run directory.')
  p = sub.add_parser('train-student', help='Train the student detector.')
  _common(p)
  p.add_argument('--pseudo', default=None,
                 help='Pseudo-label file; defaults to the run directory.')
  p = sub.add_parser('evaluate', help='Evaluate a student or a prediction file.')
  _common(p)
  p.add_argument('--checkpoint', default=None)
  p.add_argument('--predictions', default=None,
                 help='JSONL of {scene_id, boxes}; skips the model.')
  p.add_argument('--split', default='test', choices=['val', 'test', 'weak'])
  p = sub.add_parser('plot', help='Plot range-binned reports.')
  _common(p)
  p.add_argument('--report', action='append', default=[], metavar='NAME=PATH',
                 help='Report JSON to plot. Repeatable.')
  p = sub.add_parser('reproduce-trends',
                     help='Run the multi-seed ratio grid and ablations.')
  _common(p)
  p.add_argument('--ablation', action='append', choices=TRENDS, default=None,
                 help='Trend to run (default: grid). Repeatable.')
  p.add_argument('--seeds', default=','.join(str(s) for s in SEEDS),
                 help='Comma-separated seeds.')
  return parser


def run(args):
  config = load_config(args.config, seed=args.seed, out=args.out,
                       overrides=args.stage_override)
  if args.command == 'gen-data':
    stage_generate_data(config)
  elif args.command == 'train-teacher':
    stage_train_teacher(config)
  elif args.command == 'gen-pseudo':
    stage_generate_pseudo(config, args.checkpoint)
  elif args.command == 'train-student':
    stage_train_student(config, args.pseudo)
  elif args.command == 'evaluate':
    stage_evaluate(config, checkpoint=args.checkpoint,
                   predictions=args.predictions, split=args.split)
  elif args.command == 'plot':
    stage_plot(config, _parse_reports(args.report))
  elif args.command == 'reproduce-trends':
    reproduce_trends(config, which=tuple(args.ablation or ('grid',)),
                     seeds=_parse_seeds(args.seeds))


def main(argv=None):
  args = build_parser().parse_args(argv)
  logger = get_logger()
  try:
    run(args)
  except ConfigError as e:
    logger.error('config error: {}'.format(e))
    return EXIT_CONFIG
  except MissingArtifactError as e:
    logger.error('missing artifact: {}'.format(e))
    return EXIT_MISSING
  return EXIT_OK


if __name__ == '__main__':
  sys.exit(main())
