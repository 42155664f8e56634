# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""BEV student detector and its point-guided consistency training."""

from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch

from torch.nn import Module

from .geometry import (BEVAugmentation, BEVSpec, augment_points,
                       gaussian_bev_mask, invert_bev_augmentation)
from .layers.bev_encoder import BEVEncoder
from .layers.center_head import (CenterHead, build_targets, decode_detections,
                                 gaussian_focal_loss)
from .structures import Box3D, PointAnnotation

SSL_MODES = ('masked', 'unmasked', 'none')


@dataclass(eq=False)
class Detection(Box3D):
  """A student output box; score is the heatmap peak value."""


@dataclass(eq=False)
class BEVFeatureMap:
  """A [C, H, W] feature tensor on the grid of spec."""
  values: torch.Tensor
  spec: BEVSpec

  def __post_init__(self):
    if self.values.dim() != 3:
      raise ValueError('feature map must be [C, H, W], got {}'.format(
          tuple(self.values.shape)))
    if tuple(self.values.shape[1:]) != (self.spec.H, self.spec.W):
      raise ValueError('feature map {} does not match BEV grid {}x{}'.format(
          tuple(self.values.shape), self.spec.H, self.spec.W))


@dataclass(eq=False)
class TrainSample:
  """One scene as seen by the student: points, target boxes, annotations."""
  points: np.ndarray
  boxes: List[Box3D]
  annotations: List[PointAnnotation] = field(default_factory=list)


class StudentModel(Module):
  """BEVEncoder followed by a CenterHead."""

  def __init__(self, num_classes=3, bev=None, channels=32, trunk_layers=2,
               head_channels=32):
    super(StudentModel, self).__init__()
    bev = dict(bev or BEVSpec().as_dict())
    self.model_config = {
        'num_classes': num_classes,
        'bev': bev,
        'channels': channels,
        'trunk_layers': trunk_layers,
        'head_channels': head_channels,
    }
    self.spec = BEVSpec(**bev)
    self.num_classes = num_classes
    self.encoder = BEVEncoder(self.spec, channels=channels,
                              num_layers=trunk_layers)
    self.head = CenterHead(self.encoder.out_channels, num_classes,
                           hidden=head_channels)

  def forward(self, points_list):
    """Returns heatmap logits [B, K, H, W] and regression [B, 8, H, W]."""
    return self.head(self.encoder(points_list))

  def extract_bev_features(self, points):
    return BEVFeatureMap(values=self.encoder([points])[0], spec=self.spec)

  def detect(self, feat, score_threshold=0.1, max_detections=100):
    """Decodes detections from one feature map.

    Args:
      feat: A BEVFeatureMap.
      score_threshold: Minimum heatmap peak.
      max_detections: Cap on returned detections.

    Returns:
      A list of Detection, highest score first.
    """
    with torch.no_grad():
      heat, reg = self.head(feat.values[None])
    return detections_from_maps(torch.sigmoid(heat[0]), reg[0], self.spec,
                                score_threshold, max_detections)


def build_student(model_config):
  return StudentModel(**model_config)


def detections_from_maps(heat, reg, spec, score_threshold=0.1,
                         max_detections=100):
  """Wraps decode_detections output as Detection objects."""
  out = []
  for center, dims, yaw, cat, score in decode_detections(
      heat, reg, spec, score_threshold, max_detections):
    out.append(Detection(center=center, dims=dims, yaw=yaw, category=cat,
                         score=min(max(score, 0.0), 1.0)))
  return out


def extract_bev_features(points, model):
  return model.extract_bev_features(points)


def detect(feat, model, score_threshold=0.1, max_detections=100):
  return model.detect(feat, score_threshold, max_detections)


def _values(f):
  return f.values if isinstance(f, BEVFeatureMap) else f


def ssl_consistency_loss(f_weak, f_strong, mask=None, eps=1e-6):
  """Feature consistency between the two augmented branches.

  The per-cell distance is the L2 norm over channels of the difference. With
  a mask the loss is sum(M * d) / max(sum(M), eps); without one it is the
  mean of d over cells. f_weak is a constant target.

  Args:
    f_weak: A BEVFeatureMap or tensor [C, H, W] (or [B, C, H, W]).
    f_strong: Same shape as f_weak.
    mask: Optional [H, W] (or [B, H, W]) ndarray or tensor.
    eps: Normalizer floor.

  Returns:
    A scalar tensor.
  """
  weak = _values(f_weak).detach()
  strong = _values(f_strong)
  if weak.shape != strong.shape:
    raise ValueError('branch shapes differ: {} vs {}'.format(
        tuple(weak.shape), tuple(strong.shape)))
  d = torch.linalg.vector_norm(strong - weak, ord=2, dim=-3)
  if mask is None:
    return d.mean()
  m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask,
                      dtype=d.dtype, device=d.device)
  total = m.sum()
  if float(total) == 0.0:
    return (d * m).sum()
  return (m * d).sum() / total.clamp(min=eps)


def point_dropout(points, rng, rate):
  """Drops each point independently with probability rate."""
  if rate <= 0 or len(points) == 0:
    return points
  return points[rng.random(len(points)) >= rate]


def detection_loss(heat_logits, reg, boxes_list, spec, num_classes):
  """Heatmap focal loss plus masked L1 regression over a batch.

  Args:
    heat_logits: Tensor [B, K, H, W].
    reg: Tensor [B, 8, H, W].
    boxes_list: B lists of Box3D, GT and pseudo boxes alike.
    spec: A BEVSpec.
    num_classes: K.

  Returns:
    A dict with scalar tensors 'loss_heatmap' and 'loss_reg'.
  """
  device = heat_logits.device
  heat = torch.sigmoid(heat_logits).clamp(1e-4, 1 - 1e-4)
  hm_losses, reg_losses = [], []
  for b, boxes in enumerate(boxes_list):
    targets = build_targets(boxes, spec, num_classes)
    hm = torch.as_tensor(targets['heatmap'], device=device)
    hm_losses.append(gaussian_focal_loss(heat[b], hm))
    ind = torch.as_tensor(targets['ind'], device=device)
    if ind.numel() == 0:
      reg_losses.append(reg[b].sum() * 0.0)
      continue
    pred = reg[b].flatten(1).t()[ind]
    target = torch.as_tensor(targets['reg'], device=device)
    reg_losses.append((pred - target).abs().sum(1).mean())
  return {
      'loss_heatmap': torch.stack(hm_losses).mean(),
      'loss_reg': torch.stack(reg_losses).mean(),
  }


def _canonical_features(model, points_list, augs):
  feats = model.encoder(
      [augment_points(p, a, model.spec) for p, a in zip(points_list, augs)])
  return torch.stack(
      [invert_bev_augmentation(f, a) for f, a in zip(feats, augs)])


def student_train_step(model, optimizer, labeled_batch, pseudo_batch, rng,
                       ssl_weight=1.0, ssl_mode='masked', mask_sigma=2.0,
                       dropout=0.2):
  """One optimization step on labeled plus pseudo-labeled scenes.

  The weak branch sees flips only and carries the detection loss. For pseudo
  scenes a strong branch adds a quarter turn and point dropout; after both
  maps are turned back to the canonical frame the consistency loss pulls the
  strong features onto the weak ones, weighted by the annotation mask.

  Args:
    model: A StudentModel.
    optimizer: A torch optimizer.
    labeled_batch: A list of TrainSample with GT boxes.
    pseudo_batch: A list of TrainSample with teacher boxes and annotations.
    rng: A numpy Generator drawing augmentations and dropout.
    ssl_weight: Weight of the consistency loss.
    ssl_mode: 'masked', 'unmasked' or 'none'.
    mask_sigma: Gaussian mask sigma in cells.
    dropout: Strong-branch point dropout rate.

  Returns:
    A dict of float loss terms plus 'lambda'.
  """
  if ssl_mode not in SSL_MODES:
    raise ValueError('ssl_mode must be one of {}, got {}'.format(
        SSL_MODES, ssl_mode))
  samples = list(labeled_batch) + list(pseudo_batch)
  if not samples:
    raise ValueError('empty training batch')
  model.train()
  optimizer.zero_grad()
  spec = model.spec

  weak_augs = [BEVAugmentation.sample(rng, rotate=False) for _ in samples]
  feats_weak = _canonical_features(model, [s.points for s in samples],
                                   weak_augs)
  heat, reg = model.head(feats_weak)
  det = detection_loss(heat, reg, [s.boxes for s in samples], spec,
                       model.num_classes)

  loss_ssl = feats_weak.sum() * 0.0
  if ssl_weight > 0 and ssl_mode != 'none' and pseudo_batch:
    strong_augs = [BEVAugmentation.sample(rng, rotate=True) for _ in pseudo_batch]
    strong_points = [point_dropout(s.points, rng, dropout) for s in pseudo_batch]
    feats_strong = _canonical_features(model, strong_points, strong_augs)
    offset = len(labeled_batch)
    terms = []
    for j, s in enumerate(pseudo_batch):
      mask = None
      if ssl_mode == 'masked':
        mask = gaussian_bev_mask(s.annotations, spec, mask_sigma)
      terms.append(
          ssl_consistency_loss(feats_weak[offset + j], feats_strong[j], mask))
    loss_ssl = torch.stack(terms).mean()

  loss = det['loss_heatmap'] + det['loss_reg'] + ssl_weight * loss_ssl
  loss.backward()
  optimizer.step()
  return {
      'loss': float(loss),
      'loss_heatmap': float(det['loss_heatmap']),
      'loss_reg': float(det['loss_reg']),
      'loss_ssl': float(loss_ssl),
      'lambda': float(ssl_weight),
  }


def predict_points(model, points, score_threshold=0.1, max_detections=100):
  """Detections for one point cloud in eval mode."""
  model.eval()
  with torch.no_grad():
    feat = model.extract_bev_features(points)
  return model.detect(feat, score_threshold, max_detections)
