# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Center-distance detection metrics: AP, TP errors, SPNDS, range bins.

Predictions and ground truths are given either as flat lists of Box3D (one
scene) or as lists of per-scene lists. Matching never crosses scenes; the
score ordering is global, as in the nuScenes protocol.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import wrap_angle
from .structures import CATEGORY_NAMES, Box3D

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
DEFAULT_BINS = ((0.0, 20.0), (20.0, 30.0), (30.0, 40.0), (40.0, math.inf))

_NELEM = 101


def category_name(c):
  return CATEGORY_NAMES[c] if 0 <= c < len(CATEGORY_NAMES) else 'class_{}'.format(c)


def _as_scenes(boxes):
  boxes = list(boxes)
  if len(boxes) == 0 or isinstance(boxes[0], Box3D):
    return [boxes]
  return [list(b) for b in boxes]


def _pair_scenes(preds, gts):
  pred_scenes, gt_scenes = _as_scenes(preds), _as_scenes(gts)
  if len(pred_scenes) != len(gt_scenes):
    raise ValueError('{} prediction scenes for {} ground-truth scenes'.format(
        len(pred_scenes), len(gt_scenes)))
  return pred_scenes, gt_scenes


def _flatten(scenes):
  return [b for boxes in scenes for b in boxes]


def center_distance(a, b):
  """BEV distance between box centers."""
  return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def _greedy_match(pred_scenes, gt_scenes, category, threshold):
  """Greedy matching in descending score order.

  Returns:
    A list of (scene index, pred index, gt index or -1), in match order.
  """
  order = []
  for s, preds in enumerate(pred_scenes):
    for i, p in enumerate(preds):
      if p.category == category:
        order.append((s, i))
  # Stable: ties keep input order.
  order.sort(key=lambda si: -pred_scenes[si[0]][si[1]].score)

  taken = set()
  matches = []
  for s, i in order:
    pred = pred_scenes[s][i]
    best, best_dist = -1, math.inf
    for j, gt in enumerate(gt_scenes[s]):
      if gt.category != category or (s, j) in taken:
        continue
      d = center_distance(pred, gt)
      if d < best_dist:
        best, best_dist = j, d
    if best >= 0 and best_dist < threshold:
      taken.add((s, best))
      matches.append((s, i, best))
    else:
      matches.append((s, i, -1))
  return matches


def match_detections(preds, gts, category, threshold):
  """Matches predictions of one category to ground truths.

  Args:
    preds: Predicted Box3D (flat list or per-scene lists).
    gts: Ground-truth Box3D, same nesting as preds.
    category: Category id.
    threshold: Maximum BEV center distance in meters (exclusive).

  Returns:
    tp_pairs: A list of (pred, gt) Box3D pairs.
    fp: A list of unmatched predictions.
    fn: Number of unmatched ground truths of the category.

  Raises:
    ValueError: If threshold is not positive or the scene counts disagree.
  """
  if threshold <= 0:
    raise ValueError('match threshold must be positive, got {}'.format(threshold))
  pred_scenes, gt_scenes = _pair_scenes(preds, gts)
  tp_pairs, fp = [], []
  for s, i, j in _greedy_match(pred_scenes, gt_scenes, category, threshold):
    if j >= 0:
      tp_pairs.append((pred_scenes[s][i], gt_scenes[s][j]))
    else:
      fp.append(pred_scenes[s][i])
  npos = sum(1 for g in _flatten(gt_scenes) if g.category == category)
  return tp_pairs, fp, npos - len(tp_pairs)


def precision_recall_curve(is_tp, npos):
  """Interpolates precision onto 101 evenly spaced recall levels.

  Args:
    is_tp: Sequence of 0/1 flags in descending score order.
    npos: Number of ground truths.

  Returns:
    An ndarray of shape [101] with precision at recall 0, 0.01, ..., 1.
  """
  if npos == 0 or len(is_tp) == 0 or not any(is_tp):
    return np.zeros(_NELEM)
  tp = np.cumsum(is_tp).astype(float)
  fp = np.cumsum([1 - t for t in is_tp]).astype(float)
  prec = tp / (tp + fp)
  rec = tp / float(npos)
  rec_interp = np.linspace(0, 1, _NELEM)
  return np.interp(rec_interp, rec, prec, right=0)


def calc_ap(prec, min_recall=MIN_RECALL, min_precision=MIN_PRECISION):
  """Area under the interpolated PR curve above the recall/precision floors.

  Precision is shifted down by min_precision, clamped at 0 and rescaled by
  1 / (1 - min_precision), the nuScenes convention, so a flat curve at
  min_precision scores 0 and a perfect one scores 1.

  Args:
    prec: Precision at 101 recall levels.
    min_recall: Recall levels up to this value are ignored.
    min_precision: Precision below this value counts as zero.

  Returns:
    AP normalized to [0, 1].
  """
  assert 0 <= min_precision < 1
  assert 0 <= min_recall <= 1
  prec = np.copy(prec)
  prec = prec[round(100 * min_recall) + 1:]
  prec -= min_precision
  prec[prec < 0] = 0
  return float(np.mean(prec)) / (1.0 - min_precision)


def average_precision(preds, gts, category, threshold):
  """AP of one category at one distance threshold.

  Returns:
    AP in [0, 1], or None when there is no ground truth of the category.
  """
  pred_scenes, gt_scenes = _pair_scenes(preds, gts)
  npos = sum(1 for g in _flatten(gt_scenes) if g.category == category)
  if npos == 0:
    return None
  matches = _greedy_match(pred_scenes, gt_scenes, category, threshold)
  is_tp = [1 if j >= 0 else 0 for _, _, j in matches]
  return calc_ap(precision_recall_curve(is_tp, npos))


def scale_iou(a, b):
  """IoU of two boxes after aligning their centers and headings."""
  inter = float(np.prod(np.minimum(a.dims, b.dims)))
  union = float(np.prod(a.dims)) + float(np.prod(b.dims)) - inter
  return inter / union


def yaw_difference(a, b):
  """Smallest absolute heading difference in [0, pi]."""
  return abs(wrap_angle(a.yaw - b.yaw))


def compute_tp_errors(tp_pairs):
  """Mean translation, scale and orientation errors over matched pairs.

  Args:
    tp_pairs: A list of (pred, gt) Box3D pairs.

  Returns:
    A tuple (ATE, ASE, AOE); each is 1.0 when tp_pairs is empty.
  """
  if len(tp_pairs) == 0:
    return 1.0, 1.0, 1.0
  ate = np.mean([center_distance(p, g) for p, g in tp_pairs])
  ase = np.mean([1.0 - scale_iou(p, g) for p, g in tp_pairs])
  aoe = np.mean([yaw_difference(p, g) for p, g in tp_pairs])
  return float(ate), float(ase), float(aoe)


def spnds(mAP, mATE, mASE, mAOE):
  """Detection score without velocity and attribute terms."""
  tp_score = sum(1.0 - min(1.0, e) for e in (mATE, mASE, mAOE))
  return (5.0 * mAP + tp_score) / 8.0


@dataclass
class MetricsReport:
  """Evaluation summary; ap maps category name -> threshold -> AP or None."""
  ap: Dict[str, Dict[str, Optional[float]]]
  map: float
  mate: float
  mase: float
  maoe: float
  spnds: float
  num_gt: int
  range: Optional[Tuple[float, float]] = None
  bins: List['MetricsReport'] = field(default_factory=list)

  @property
  def is_empty(self):
    return self.num_gt == 0

  def to_json(self):
    d = {
        'ap': self.ap,
        'map': self.map,
        'mate': self.mate,
        'mase': self.mase,
        'maoe': self.maoe,
        'spnds': self.spnds,
        'num_gt': self.num_gt,
        'bins': [b.to_json() for b in self.bins],
    }
    if self.range is not None:
      hi = self.range[1]
      d['range'] = [self.range[0], None if math.isinf(hi) else hi]
    return d

  @classmethod
  def from_json(cls, d):
    rng = None
    if 'range' in d:
      lo, hi = d['range']
      rng = (lo, math.inf if hi is None else hi)
    return cls(ap=d['ap'], map=d['map'], mate=d['mate'], mase=d['mase'],
               maoe=d['maoe'], spnds=d['spnds'], num_gt=d['num_gt'], range=rng,
               bins=[cls.from_json(b) for b in d.get('bins', [])])


def evaluate_detections(preds, gts, num_categories, thresholds=DIST_THRESHOLDS,
                        tp_threshold=TP_THRESHOLD):
  """Builds a MetricsReport.

  mAP averages over thresholds and over categories with at least one ground
  truth; TP errors are per-category means at tp_threshold, then averaged.

  Args:
    preds: Predicted Box3D (flat list or per-scene lists).
    gts: Ground-truth Box3D, same nesting.
    num_categories: Number of category ids.
    thresholds: Distance thresholds for AP.
    tp_threshold: Distance threshold for TP errors.

  Returns:
    A MetricsReport without bins.
  """
  pred_scenes, gt_scenes = _pair_scenes(preds, gts)
  ap_table = {}
  aps, errs = [], []
  num_gt = 0
  for c in range(num_categories):
    row = {}
    npos = sum(1 for g in _flatten(gt_scenes) if g.category == c)
    num_gt += npos
    for th in thresholds:
      ap = average_precision(pred_scenes, gt_scenes, c, th)
      row['{:g}'.format(th)] = ap
      if ap is not None:
        aps.append(ap)
    ap_table[category_name(c)] = row
    if npos > 0:
      tp_pairs, _, _ = match_detections(pred_scenes, gt_scenes, c, tp_threshold)
      errs.append(compute_tp_errors(tp_pairs))

  mAP = float(np.mean(aps)) if aps else 0.0
  if errs:
    mate, mase, maoe = (float(v) for v in np.mean(np.array(errs), axis=0))
  else:
    mate = mase = maoe = 1.0
  return MetricsReport(ap=ap_table, map=mAP, mate=mate, mase=mase, maoe=maoe,
                       spnds=spnds(mAP, mate, mase, maoe), num_gt=num_gt)


def validate_bins(bins):
  """Checks that bins are disjoint, ordered and cover [0, inf).

  Raises:
    ValueError: On overlap, gap or bad bounds.
  """
  bins = [(float(lo), float(hi)) for lo, hi in bins]
  if not bins:
    raise ValueError('at least one range bin is required')
  for lo, hi in bins:
    if not lo < hi:
      raise ValueError('empty range bin [{}, {})'.format(lo, hi))
  ordered = sorted(bins)
  if ordered[0][0] != 0.0:
    raise ValueError('range bins must start at 0')
  for (lo0, hi0), (lo1, hi1) in zip(ordered[:-1], ordered[1:]):
    if lo1 < hi0:
      raise ValueError('overlapping range bins [{}, {}) and [{}, {})'.format(
          lo0, hi0, lo1, hi1))
    if lo1 > hi0:
      raise ValueError('range bins leave a gap between {} and {}'.format(hi0, lo1))
  if not math.isinf(ordered[-1][1]):
    raise ValueError('range bins must extend to infinity')
  return bins


def _bin_index(distance, bins):
  for k, (lo, hi) in enumerate(bins):
    if lo <= distance < hi:
      return k
  raise AssertionError('distance {} not covered by bins'.format(distance))


def range_binned_eval(preds, gts, bins=DEFAULT_BINS, num_categories=3,
                      thresholds=DIST_THRESHOLDS, tp_threshold=TP_THRESHOLD):
  """Evaluates separately per ego-distance range.

  Ground truths fall in the bin of their own ego distance; a prediction
  follows the ground truth it matches at tp_threshold, or its own center
  when unmatched.

  Returns:
    A list of MetricsReport, one per bin in the given order.
  """
  bins = validate_bins(bins)
  pred_scenes, gt_scenes = _pair_scenes(preds, gts)

  pred_bin = [[None] * len(p) for p in pred_scenes]
  for c in range(num_categories):
    for s, i, j in _greedy_match(pred_scenes, gt_scenes, c, tp_threshold):
      ref = gt_scenes[s][j] if j >= 0 else pred_scenes[s][i]
      pred_bin[s][i] = _bin_index(ref.ego_distance(), bins)
  for s, preds_s in enumerate(pred_scenes):
    for i, p in enumerate(preds_s):
      if pred_bin[s][i] is None:
        pred_bin[s][i] = _bin_index(p.ego_distance(), bins)

  reports = []
  for k, rng in enumerate(bins):
    bp = [[p for i, p in enumerate(ps) if pred_bin[s][i] == k]
          for s, ps in enumerate(pred_scenes)]
    bg = [[g for g in gs if _bin_index(g.ego_distance(), bins) == k]
          for gs in gt_scenes]
    report = evaluate_detections(bp, bg, num_categories, thresholds, tp_threshold)
    report.range = rng
    reports.append(report)
  return reports


def aggregate_bins(reports):
  """Mean mAP and SPNDS over bins that contain ground truth."""
  valid = [r for r in reports if not r.is_empty]
  if not valid:
    return {'map': 0.0, 'spnds': 0.0}
  return {
      'map': float(np.mean([r.map for r in valid])),
      'spnds': float(np.mean([r.spnds for r in valid])),
  }
