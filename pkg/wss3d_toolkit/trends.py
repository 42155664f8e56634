# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Multi-seed experiment runners and their paired significance tests.

Each runner writes the reports of every cell under out_dir/<runner>/ and a
summary JSON at out_dir/<runner>.json.
"""

import logging
import math
import os

import numpy as np
from scipy.stats import ttest_rel

from .config import derive
from .inout import load_json, save_json
from .metrics import MetricsReport
from .nds_eval import comparison_table
from .pipeline import (run_paths, stage_generate_data, stage_generate_pseudo,
                       stage_train_student, stage_train_teacher)
from .plots import emit_plots

logger = logging.getLogger(__name__)

RATIOS = (0.02, 0.05, 0.10)
SEEDS = (0, 1, 2)
TRENDS = ('grid', 'query-init', 'fusion', 'ssl')


def paired_test(a, b, alternative='greater'):
  """One-sided paired t-test of a against b.

  Returns:
    A dict with both means, the mean difference, the statistic and the
    p-value; the last two are None when the test is undefined (fewer than two
    pairs or zero variance of the differences).
  """
  a = np.asarray(a, dtype=np.float64)
  b = np.asarray(b, dtype=np.float64)
  out = {
      'mean_a': float(a.mean()) if a.size else None,
      'mean_b': float(b.mean()) if b.size else None,
      'mean_diff': float((a - b).mean()) if a.size else None,
      'statistic': None,
      'pvalue': None,
  }
  if a.size >= 2 and np.std(a - b) > 0:
    res = ttest_rel(a, b, alternative=alternative)
    if not math.isnan(res.pvalue):
      out['statistic'] = float(res.statistic)
      out['pvalue'] = float(res.pvalue)
  return out


def _cell(config, out_dir, name, seed, overrides=()):
  return derive(config,
                output_dir=os.path.join(out_dir, name, 'seed_{}'.format(seed)),
                overrides=['dataset.seed={}'.format(seed)] + list(overrides))


def _keep(report, out_dir, name, seed, tag):
  path = os.path.join(out_dir, name, 'seed_{}'.format(seed),
                      'report_{}.json'.format(tag))
  os.makedirs(os.path.dirname(path), exist_ok=True)
  save_json(path, report.to_json())
  return report


def _bin(report, lo):
  for b in report.bins:
    if b.range[0] == lo:
      return b
  raise KeyError('no range bin starting at {}'.format(lo))


def ratio_grid(config, out_dir, ratios=RATIOS, seeds=SEEDS, include_full=True):
  """Labeled-only baseline vs teacher-student training at several ratios.

  Returns:
    The summary dict.
  """
  name = 'grid'
  runs = {}
  first = {}
  for seed in seeds:
    for ratio in ratios:
      cfg = _cell(config, out_dir, name + '/ratio_{:g}'.format(ratio), seed,
                  ['dataset.split_ratio={}'.format(ratio), 'student.mode=wssl'])
      stage_generate_data(cfg)
      stage_train_teacher(cfg)
      stage_generate_pseudo(cfg)
      _, ours = stage_train_student(cfg)
      base_cfg = derive(cfg, overrides=['student.mode=baseline'])
      _, base = stage_train_student(base_cfg)
      for mode, report in (('ours', ours), ('baseline', base)):
        key = '{}@{:g}'.format(mode, ratio)
        _keep(report, out_dir, name + '/ratio_{:g}'.format(ratio), seed, mode)
        runs.setdefault(key, []).append(report)
        if seed == seeds[0]:
          first[key] = report
    if include_full:
      cfg = _cell(config, out_dir, name + '/full', seed,
                  ['dataset.split_ratio=1.0', 'student.mode=baseline'])
      stage_generate_data(cfg)
      _, full = stage_train_student(cfg)
      _keep(full, out_dir, name + '/full', seed, 'full')
      runs.setdefault('full', []).append(full)
      if seed == seeds[0]:
        first['full'] = full

  summary = {
      'seeds': list(seeds),
      'ratios': list(ratios),
      'runs': {
          k: {
              'spnds': [r.spnds for r in v],
              'map': [r.map for r in v],
          } for k, v in runs.items()
      },
      'tests': {},
  }
  for ratio in ratios:
    ours = runs['ours@{:g}'.format(ratio)]
    base = runs['baseline@{:g}'.format(ratio)]
    summary['tests']['{:g}'.format(ratio)] = {
        'spnds': paired_test([r.spnds for r in ours], [r.spnds for r in base]),
        'map': paired_test([r.map for r in ours], [r.map for r in base]),
        'ours_wins_every_seed': all(
            o.spnds > b.spnds and o.map > b.map for o, b in zip(ours, base)),
    }
  if include_full:
    full_spnds = float(np.mean([r.spnds for r in runs['full']]))
    summary['fraction_of_full'] = {
        k: (float(np.mean([r.spnds for r in v])) / full_spnds
            if full_spnds > 0 else None)
        for k, v in runs.items() if k != 'full'
    }

  logger.info('Ratio grid (seed {}): \n'.format(seeds[0]) +
              comparison_table(sorted(first.items())))
  emit_plots({k: first[k] for k in sorted(first)},
             os.path.join(out_dir, name, 'plots'))
  save_json(os.path.join(out_dir, name + '.json'), summary)
  return summary


def query_init_ablation(config, out_dir, seeds=SEEDS):
  """Explicit vs implicit teacher queries: validation mAP and pseudo ATE."""
  name = 'query_init'
  val_map = {'explicit': [], 'implicit': []}
  pseudo_ate = {'explicit': [], 'implicit': []}
  for seed in seeds:
    cfg = _cell(config, out_dir, name, seed)
    stage_generate_data(cfg)
    for init in ('explicit', 'implicit'):
      c = derive(cfg, overrides=['teacher.query_init={}'.format(init)])
      _, report = stage_train_teacher(c)
      _keep(report, out_dir, name, seed, 'val_' + init)
      stage_generate_pseudo(c)
      pseudo = MetricsReport.from_json(load_json(os.path.join(
          run_paths(c)['pseudo_dir'], 'nds_eval_weak_pseudo_labels.json')))
      _keep(pseudo, out_dir, name, seed, 'pseudo_' + init)
      val_map[init].append(report.map)
      pseudo_ate[init].append(pseudo.mate)

  summary = {
      'seeds': list(seeds),
      'val_map': val_map,
      'pseudo_mate': pseudo_ate,
      'map_test': paired_test(val_map['explicit'], val_map['implicit']),
      'mate_test': paired_test(pseudo_ate['explicit'], pseudo_ate['implicit'],
                               alternative='less'),
  }
  save_json(os.path.join(out_dir, name + '.json'), summary)
  return summary


def fusion_ablation(config, out_dir, seeds=SEEDS, far=40.0, near=0.0):
  """Teacher with image rasters vs zeroed image features, per range bin."""
  name = 'fusion'
  rows = {'fused': [], 'lidar_only': []}
  first = {}
  for seed in seeds:
    cfg = _cell(config, out_dir, name, seed)
    stage_generate_data(cfg)
    for tag, flag in (('fused', 'true'), ('lidar_only', 'false')):
      c = derive(cfg, overrides=['teacher.use_images={}'.format(flag)])
      _, report = stage_train_teacher(c)
      _keep(report, out_dir, name, seed, tag)
      rows[tag].append(report)
      if seed == seeds[0]:
        first[tag] = report

  def per_bin(tag, lo):
    return [_bin(r, lo).map for r in rows[tag]]

  far_gain = np.array(per_bin('fused', far)) - np.array(per_bin('lidar_only', far))

  def rel(lo):
    f = np.mean(per_bin('fused', lo))
    z = np.mean(per_bin('lidar_only', lo))
    return float((f - z) / z) if z > 0 else None

  summary = {
      'seeds': list(seeds),
      'far_map': {t: per_bin(t, far) for t in rows},
      'near_map': {t: per_bin(t, near) for t in rows},
      'far_improves_every_seed': bool(np.all(far_gain > 0)),
      'far_relative_change': rel(far),
      'near_relative_change': rel(near),
      'far_test': paired_test(per_bin('fused', far), per_bin('lidar_only', far)),
  }
  emit_plots(first, os.path.join(out_dir, name, 'plots'))
  save_json(os.path.join(out_dir, name + '.json'), summary)
  return summary


def ssl_ablation(config, out_dir, seeds=SEEDS):
  """Student with masked, unmasked and no consistency loss."""
  name = 'ssl'
  maps = {'masked': [], 'unmasked': [], 'none': []}
  spnds = {'masked': [], 'unmasked': [], 'none': []}
  for seed in seeds:
    cfg = _cell(config, out_dir, name, seed, ['student.mode=wssl'])
    stage_generate_data(cfg)
    stage_train_teacher(cfg)
    stage_generate_pseudo(cfg)
    for mode in maps:
      c = derive(cfg, overrides=['student.ssl_mode={}'.format(mode)])
      _, report = stage_train_student(c)
      _keep(report, out_dir, name, seed, mode)
      maps[mode].append(report.map)
      spnds[mode].append(report.spnds)

  summary = {
      'seeds': list(seeds),
      'map': maps,
      'spnds': spnds,
      'masked_vs_none': paired_test(maps['masked'], maps['none']),
      'masked_vs_unmasked': paired_test(maps['masked'], maps['unmasked']),
      'unmasked_vs_none': paired_test(maps['unmasked'], maps['none'],
                                      alternative='two-sided'),
  }
  save_json(os.path.join(out_dir, name + '.json'), summary)
  return summary


_RUNNERS = {
    'grid': ratio_grid,
    'query-init': query_init_ablation,
    'fusion': fusion_ablation,
    'ssl': ssl_ablation,
}


def reproduce_trends(config, which=('grid',), seeds=SEEDS):
  """Runs the selected trend runners under config.output_dir.

  Returns:
    A dict of runner name to summary.
  """
  out_dir = os.path.abspath(config.output_dir)
  os.makedirs(out_dir, exist_ok=True)
  summaries = {}
  for name in which:
    if name not in _RUNNERS:
      raise KeyError('Unknown trend: {}'.format(name))
    logger.info('Running trend {} over seeds {}'.format(name, list(seeds)))
    summaries[name] = _RUNNERS[name](config, out_dir, seeds=seeds)
  return summaries
