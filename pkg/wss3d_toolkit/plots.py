# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Range-bin bar charts of evaluation reports."""

import logging
import math
import os

import matplotlib
matplotlib.use('Agg')
from matplotlib import pyplot as plt
import numpy as np

from .inout import save_json

logger = logging.getLogger(__name__)

METRICS = ('spnds', 'map')
_LABELS = {'spnds': 'SPNDS', 'map': 'mAP'}


def bin_label(rng):
  lo, hi = rng
  if math.isinf(hi):
    return '>{:g}m'.format(lo)
  return '{:g}-{:g}m'.format(lo, hi)


def chart_data(reports, metric):
  """Collects one metric per bin per run.

  Args:
    reports: A dict of run name to MetricsReport with bins.
    metric: 'spnds' or 'map'.

  Returns:
    A dict with 'metric', 'bins' (labels), 'ranges' and 'series' (run name to
    per-bin values; None for bins without ground truth).
  """
  first = next(iter(reports.values()))
  ranges = [b.range for b in first.bins]
  series = {}
  for name, report in reports.items():
    if [b.range for b in report.bins] != ranges:
      raise ValueError('run {} uses different range bins'.format(name))
    series[name] = [
        None if b.is_empty else float(getattr(b, metric)) for b in report.bins
    ]
  return {
      'metric': metric,
      'bins': [bin_label(r) for r in ranges],
      'ranges': [[lo, None if math.isinf(hi) else hi] for lo, hi in ranges],
      'series': series,
  }


def gain_data(data):
  """Relative gain of every run over the first run, per bin."""
  names = list(data['series'])
  base = data['series'][names[0]]
  series = {}
  for name in names[1:]:
    series[name] = [
        None if (b is None or v is None or b <= 0) else (v - b) / b
        for b, v in zip(base, data['series'][name])
    ]
  return dict(data, metric='gain_' + data['metric'], baseline=names[0],
              series=series)


def _bar_chart(data, ylabel, path):
  names = list(data['series'])
  n_bins = len(data['bins'])
  width = 0.8 / max(len(names), 1)
  x = np.arange(n_bins)

  fig, ax = plt.subplots(figsize=(1.6 * n_bins + 2, 4))
  for k, name in enumerate(names):
    values = [0.0 if v is None else v for v in data['series'][name]]
    ax.bar(x + (k - (len(names) - 1) / 2.0) * width, values, width, label=name)
  ax.set_xticks(x)
  ax.set_xticklabels(data['bins'])
  ax.set_xlabel('ego distance')
  ax.set_ylabel(ylabel)
  ax.axhline(0.0, color='k', linewidth=0.5)
  ax.legend()
  fig.tight_layout()
  fig.savefig(path, dpi=100)
  plt.close(fig)


def emit_plots(reports, out_dir, metrics=METRICS):
  """Writes one grouped bar chart per metric, plus gain charts for >= 2 runs.

  Each image <name>.png comes with <name>.json holding the plotted numbers.

  Args:
    reports: A dict of run name to MetricsReport with range bins.
    out_dir: Output directory.
    metrics: Report fields to plot.

  Returns:
    A dict of chart name to image path.

  Raises:
    ValueError: If no report carries range bins.
  """
  if not reports or not all(r.bins for r in reports.values()):
    raise ValueError('emit_plots needs reports with range bins')
  os.makedirs(out_dir, exist_ok=True)
  images = {}
  for metric in metrics:
    data = chart_data(reports, metric)
    charts = [('range_{}'.format(metric), data, _LABELS.get(metric, metric))]
    if len(reports) >= 2:
      charts.append(('range_gain_{}'.format(metric), gain_data(data),
                     'relative gain over {}'.format(next(iter(reports)))))
    for name, d, ylabel in charts:
      path = os.path.join(out_dir, name + '.png')
      _bar_chart(d, ylabel, path)
      save_json(os.path.join(out_dir, name + '.json'), d)
      images[name] = path
      logger.info('Saved {}'.format(path))
  return images
