# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Detection evaluator."""

import logging
import os

from tabulate import tabulate

from .dataset import load_hidden_boxes
from .factory import get_dataset
from .inout import load_jsonl, records_to_boxes, save_json
from .metrics import (DEFAULT_BINS, DIST_THRESHOLDS, TP_THRESHOLD,
                      evaluate_detections, range_binned_eval)

logger = logging.getLogger(__name__)


def _format_range(rng):
  lo, hi = rng
  return '[{:g}, {})'.format(lo, 'inf' if hi == float('inf') else '{:g}'.format(hi))


def report_table(report):
  """Renders per-category AP and the summary of a MetricsReport."""
  ths = None
  rows = []
  for name, row in report.ap.items():
    ths = list(row)
    rows.append([name] + [row[t] if row[t] is not None else '-' for t in ths])
  ap_table = tabulate(rows,
                      headers=['category'] + ['AP@{}m'.format(t) for t in ths or []],
                      tablefmt='pipe',
                      floatfmt='.4f',
                      numalign='right')
  summary = [['all', report.map, report.mate, report.mase, report.maoe,
              report.spnds, report.num_gt]]
  for b in report.bins:
    summary.append([_format_range(b.range), b.map, b.mate, b.mase, b.maoe,
                    b.spnds, b.num_gt])
  summary_table = tabulate(
      summary,
      headers=['range', 'mAP', 'mATE', 'mASE', 'mAOE', 'SPNDS', '#GT'],
      tablefmt='pipe',
      floatfmt='.4f',
      numalign='right')
  return ap_table + '\n\n' + summary_table


def comparison_table(named_reports):
  """Renders SPNDS and mAP of several runs side by side.

  Args:
    named_reports: A dict or list of (name, MetricsReport).

  Returns:
    A pipe table string with one row per run and one column pair per bin.
  """
  items = list(named_reports.items()) if isinstance(named_reports,
                                                    dict) else list(named_reports)
  bins = items[0][1].bins if items else []
  headers = ['run', 'SPNDS', 'mAP']
  for b in bins:
    headers += ['SPNDS ' + _format_range(b.range), 'mAP ' + _format_range(b.range)]
  rows = []
  for name, r in items:
    row = [name, r.spnds, r.map]
    for b in r.bins:
      row += [b.spnds, b.map]
    rows.append(row)
  return tabulate(rows, headers=headers, tablefmt='pipe', floatfmt='.4f',
                  numalign='right')


class DetectionEvaluator():
  """Detection evaluator."""

  def __init__(self, root, name, num_categories=3, thresholds=DIST_THRESHOLDS,
               tp_threshold=TP_THRESHOLD, bins=DEFAULT_BINS):
    """Constructor.

    Args:
      root: Dataset root directory.
      name: Split name. 'weak' is scored against the hidden boxes.
      num_categories: Number of categories.
      thresholds: AP distance thresholds.
      tp_threshold: TP error distance threshold.
      bins: Range bins; None disables the breakdown.
    """
    self._name = name
    self._num_categories = num_categories
    self._thresholds = tuple(thresholds)
    self._tp_threshold = tp_threshold
    self._bins = bins

    dataset = get_dataset(root, name)
    self._scene_ids = dataset.scene_ids
    if name == 'weak':
      store = load_hidden_boxes(root)
      self._gts = {sid: store.boxes(sid) for sid in self._scene_ids}
    else:
      self._gts = {s.scene_id: s.boxes for s in dataset}

  @property
  def scene_ids(self):
    return list(self._scene_ids)

  def _load_results(self, res_file):
    """Loads a JSONL result file of {scene_id, boxes} records.

    Raises:
      ValueError: If a record names an unknown scene.
    """
    results = {}
    for rec in load_jsonl(res_file):
      if rec['scene_id'] not in self._gts:
        raise ValueError('unknown scene id in result file: {}'.format(
            rec['scene_id']))
      results[rec['scene_id']] = records_to_boxes(rec['boxes'])
    return results

  def evaluate(self, res_file, out_dir=None):
    """Evaluates a result file.

    Args:
      res_file: Path to the JSONL result file.
      out_dir: Directory receiving the report JSON; defaults to the result
        file's directory.

    Returns:
      A MetricsReport.
    """
    if out_dir is None:
      out_dir = os.path.dirname(os.path.abspath(res_file))
    res_name = os.path.splitext(os.path.basename(res_file))[0]
    return self.evaluate_predictions(self._load_results(res_file), out_dir,
                                     res_name)

  def evaluate_predictions(self, predictions, out_dir=None, res_name='results'):
    """Evaluates in-memory predictions.

    Args:
      predictions: A dict of scene id to a list of Box3D. Missing scenes
        count as empty.
      out_dir: If given, the report is written to
        <out_dir>/nds_eval_<split>_<res_name>.json.
      res_name: Tag used in the report file name.

    Returns:
      A MetricsReport with range bins when bins were configured.
    """
    logger.info('Running evaluation')

    preds = [predictions.get(sid, []) for sid in self._scene_ids]
    gts = [self._gts[sid] for sid in self._scene_ids]
    report = evaluate_detections(preds, gts, self._num_categories,
                                 self._thresholds, self._tp_threshold)
    if self._bins is not None:
      report.bins = range_binned_eval(preds, gts, self._bins,
                                      self._num_categories, self._thresholds,
                                      self._tp_threshold)

    logger.info('Results: \n' + report_table(report))

    if out_dir is not None:
      os.makedirs(out_dir, exist_ok=True)
      report_file = os.path.join(
          out_dir, 'nds_eval_{}_{}.json'.format(self._name, res_name))
      save_json(report_file, report.to_json())
      logger.info('Saved report to {}'.format(report_file))

    logger.info('Evaluation complete.')

    return report
