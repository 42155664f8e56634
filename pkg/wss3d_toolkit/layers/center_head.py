# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Center heatmap head, its targets and its decoder."""

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from torch.nn import Module

from ..geometry import bev_project_points, cell_center

# dx, dy (cells, from cell center), z, log w, log l, log h, sin, cos.
NUM_REG = 8


def gaussian_radius(det_size, min_overlap=0.5):
  """Radius keeping a shifted box above min_overlap IoU with the original.

  Args:
    det_size: (height, width) of the box in cells.
    min_overlap: Minimum IoU.

  Returns:
    The radius in cells.
  """
  height, width = det_size

  a1 = 1
  b1 = (height + width)
  c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
  sq1 = math.sqrt(b1**2 - 4 * a1 * c1)
  r1 = (b1 + sq1) / 2

  a2 = 4
  b2 = 2 * (height + width)
  c2 = (1 - min_overlap) * width * height
  sq2 = math.sqrt(b2**2 - 4 * a2 * c2)
  r2 = (b2 + sq2) / 2

  a3 = 4 * min_overlap
  b3 = -2 * min_overlap * (height + width)
  c3 = (min_overlap - 1) * width * height
  sq3 = math.sqrt(b3**2 - 4 * a3 * c3)
  r3 = (b3 + sq3) / 2
  return min(r1, r2, r3)


def gaussian_2d(shape, sigma=1):
  m, n = [(ss - 1.) / 2. for ss in shape]
  y, x = np.ogrid[-m:m + 1, -n:n + 1]
  h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
  h[h < np.finfo(h.dtype).eps * h.max()] = 0
  return h


def draw_heatmap_gaussian(heatmap, center, radius):
  """Writes a Gaussian peak into heatmap in place (elementwise max).

  Args:
    heatmap: An [H, W] ndarray.
    center: Integer (col, row) of the peak.
    radius: Gaussian radius in cells.

  Returns:
    The heatmap.
  """
  diameter = 2 * radius + 1
  gaussian = gaussian_2d((diameter, diameter), sigma=diameter / 6)
  x, y = int(center[0]), int(center[1])
  height, width = heatmap.shape[0:2]
  left, right = min(x, radius), min(width - x, radius + 1)
  top, bottom = min(y, radius), min(height - y, radius + 1)
  masked_heatmap = heatmap[y - top:y + bottom, x - left:x + right]
  masked_gaussian = gaussian[radius - top:radius + bottom,
                             radius - left:radius + right]
  if min(masked_gaussian.shape) > 0 and min(masked_heatmap.shape) > 0:
    np.maximum(masked_heatmap, masked_gaussian, out=masked_heatmap)
  return heatmap


def build_targets(boxes, spec, num_classes, min_radius=2, min_overlap=0.1):
  """Builds heatmap and regression targets for one scene.

  Args:
    boxes: A list of Box3D.
    spec: A BEVSpec.
    num_classes: Number of categories.
    min_radius: Smallest Gaussian radius in cells.
    min_overlap: IoU used by gaussian_radius.

  Returns:
    A dict with
      'heatmap': float32 [num_classes, H, W],
      'ind': int64 [M] flat cell indices of the box centers,
      'reg': float32 [M, 8] regression targets,
    where M counts the boxes whose centers fall inside the grid.
  """
  heatmap = np.zeros((num_classes, spec.H, spec.W), dtype=np.float32)
  inds, regs = [], []
  if boxes:
    centers = np.stack([b.center for b in boxes])
    rows, cols, in_range = bev_project_points(centers, spec)
    for box, r, c, ok in zip(boxes, rows, cols, in_range):
      if not ok:
        continue
      w, l, _ = box.dims / spec.resolution
      radius = max(min_radius, int(gaussian_radius((l, w), min_overlap)))
      ci, ri = int(math.floor(c)), int(math.floor(r))
      draw_heatmap_gaussian(heatmap[box.category], (ci, ri), radius)
      inds.append(ri * spec.W + ci)
      regs.append([
          c - (ci + 0.5), r - (ri + 0.5), box.center[2],
          *np.log(box.dims).tolist(),
          math.sin(box.yaw), math.cos(box.yaw)
      ])
  return {
      'heatmap': heatmap,
      'ind': np.array(inds, dtype=np.int64),
      'reg': np.array(regs, dtype=np.float32).reshape(-1, NUM_REG),
  }


def gaussian_focal_loss(pred, target, alpha=2.0, gamma=4.0, eps=1e-12):
  """Penalty-reduced focal loss on Gaussian heatmaps.

  Args:
    pred: Probabilities, any shape.
    target: Gaussian targets with peaks equal to 1, same shape.

  Returns:
    The summed loss divided by max(#peaks, 1).
  """
  pos = target.eq(1).float()
  neg_weights = (1 - target).pow(gamma)
  pos_loss = -(pred + eps).log() * (1 - pred).pow(alpha) * pos
  neg_loss = -(1 - pred + eps).log() * pred.pow(alpha) * neg_weights * (1 - pos)
  return (pos_loss + neg_loss).sum() / pos.sum().clamp(min=1.0)


class CenterHead(Module):
  """Per-category center heatmap plus dense box regression."""

  def __init__(self, in_channels, num_classes, hidden=32):
    super(CenterHead, self).__init__()
    self._num_classes = num_classes
    self.shared = nn.Sequential(nn.Conv2d(in_channels, hidden, 3, padding=1),
                                nn.ReLU())
    self.heatmap = nn.Conv2d(hidden, num_classes, 3, padding=1)
    self.reg = nn.Conv2d(hidden, NUM_REG, 3, padding=1)
    nn.init.constant_(self.heatmap.bias, -2.19)

  @property
  def num_classes(self):
    return self._num_classes

  def forward(self, feat):
    """Forward function.

    Args:
      feat: A tensor of shape [B, C, H, W].

    Returns:
      heatmap: Logits of shape [B, num_classes, H, W].
      reg: Regression map of shape [B, 8, H, W].
    """
    x = self.shared(feat)
    return self.heatmap(x), self.reg(x)


def decode_detections(heat, reg, spec, score_threshold=0.1, max_detections=100,
                      kernel=3):
  """Turns one scene's head outputs into boxes.

  Peaks are cells equal to the max over their kernel x kernel neighbourhood
  within the same category and above score_threshold.

  Args:
    heat: Heatmap probabilities, tensor [num_classes, H, W].
    reg: Regression map, tensor [8, H, W].
    spec: A BEVSpec.
    score_threshold: Minimum peak value.
    max_detections: Keep at most this many highest peaks.
    kernel: Local-max window.

  Returns:
    A list of (center, dims, yaw, category, score) tuples, highest score
    first.
  """
  heat = heat.detach()
  reg = reg.detach()
  hmax = F.max_pool2d(heat[None], (kernel, kernel), stride=1,
                      padding=(kernel - 1) // 2)[0]
  keep = (hmax == heat) & (heat > score_threshold)
  cls, rows, cols = torch.nonzero(keep, as_tuple=True)
  if cls.numel() == 0:
    return []
  scores = heat[cls, rows, cols]
  order = torch.argsort(scores, descending=True, stable=True)[:max_detections]

  out = []
  for k in order.tolist():
    c, r, q = int(cls[k]), int(rows[k]), int(cols[k])
    dx, dy, z, lw, ll, lh, s, co = reg[:, r, q].tolist()
    x, y = cell_center(r + dy, q + dx, spec)
    dims = np.exp(np.clip([lw, ll, lh], -5.0, 5.0))
    out.append((np.array([x, y, z]), dims, math.atan2(s, co), c,
                float(scores[k])))
  return out
