# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Point-to-box teacher: annotated points in, one box per point out."""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from torch.nn import Module

from .geometry import (BEVSpec, image_grid_spacing, make_roi_grid,
                       project_lidar_to_camera, select_view, wrap_angle)
from .inout import boxes_to_records, load_jsonl, records_to_boxes, save_jsonl
from .layers.bev_encoder import BEVEncoder, points_to_tensor
from .layers.droi_attention import DRoIAttnConfig, DRoICrossAttention
from .layers.fusion import InstanceFusion
from .layers.query_init import (ExplicitQueryInit, ImplicitQueryInit,
                                annotations_to_tensors)
from .structures import Box3D

logger = logging.getLogger(__name__)

QUERY_INITS = ('explicit', 'implicit')


@dataclass
class TeacherOutput:
  """Raw head outputs for N queries.

  Attributes:
    center: Tensor [N, 3], reference plus predicted offset.
    log_dims: Tensor [N, 3].
    sincos: Tensor [N, 2] of unnormalized (sin, cos) yaw.
    logits: Tensor [N, C].
  """
  center: torch.Tensor
  log_dims: torch.Tensor
  sincos: torch.Tensor
  logits: torch.Tensor

  def __len__(self):
    return self.center.shape[0]

  @property
  def dims(self):
    return torch.exp(self.log_dims.clamp(-5.0, 5.0))

  @property
  def yaw(self):
    return wrap_angle(torch.atan2(self.sincos[:, 0], self.sincos[:, 1]))


@dataclass
class TeacherPrediction:
  """One decoded query: a box plus its category logits."""
  box: Box3D
  logits: np.ndarray


class TeacherDecoderLayer(Module):
  """Self-attention, image and BEV DRoICA, instance fusion, FFN."""

  def __init__(self, cfg):
    super(TeacherDecoderLayer, self).__init__()
    D = cfg.embed_dim
    self.self_attn = nn.MultiheadAttention(D, cfg.heads, batch_first=True)
    self.norm1 = nn.LayerNorm(D)
    self.image_attn = DRoICrossAttention(cfg)
    self.bev_attn = DRoICrossAttention(cfg)
    self.fusion = InstanceFusion(D)
    self.norm2 = nn.LayerNorm(D)
    self.ffn = nn.Sequential(nn.Linear(D, 2 * D), nn.ReLU(),
                             nn.Linear(2 * D, D))
    self.norm3 = nn.LayerNorm(D)

  def forward(self, query, image, bev):
    """Forward function.

    Args:
      query: Tensor [N, D].
      image: A dict with 'pyramid' (list or None), 'grid' [N, P, 2], 'size',
        'index' [N] and 'visible' [N] bool.
      bev: A dict with 'pyramid', 'grid' and 'size'.

    Returns:
      A tensor of shape [N, D].
    """
    q = query[None]
    q = self.norm1(query + self.self_attn(q, q, q, need_weights=False)[0][0])

    visible = image['visible']
    if image['pyramid'] is not None and bool(visible.any()):
      f_img = self.image_attn(q, image['pyramid'], image['grid'], image['size'],
                              batch_index=image['index'])
      f_img = f_img * visible[:, None].to(f_img.dtype)
    else:
      f_img = torch.zeros_like(q)
    f_lidar = self.bev_attn(q, bev['pyramid'], bev['grid'], bev['size'])
    q = self.norm2(q + self.fusion(f_img, f_lidar, image_mask=~visible))
    return self.norm3(q + self.ffn(q))


class TeacherModel(Module):
  """Decodes one box per point annotation from image rasters and points."""

  def __init__(self,
               num_classes=3,
               image_channels=4,
               bev=None,
               embed_dim=32,
               heads=4,
               levels=2,
               grid_side=4,
               num_layers=1,
               query_init='explicit',
               use_images=True,
               max_queries=64,
               image_footprint=2.0,
               z_range=(-5.0, 3.0)):
    """Constructor.

    Args:
      num_classes: Number of categories.
      image_channels: Channels of the per-view rasters.
      bev: BEVSpec keyword dict; defaults to BEVSpec().
      embed_dim: Query width D.
      heads: Attention heads M.
      levels: Feature levels L.
      grid_side: RoI grid side K.
      num_layers: Decoder layers.
      query_init: 'explicit' or 'implicit'.
      use_images: If False the image pyramid is zeroed.
      max_queries: Learnable anchors of the implicit initializer.
      image_footprint: Metric extent covered by the image RoI grid.
      z_range: Height range used by the position encoding.
    """
    super(TeacherModel, self).__init__()
    if query_init not in QUERY_INITS:
      raise ValueError('query_init must be one of {}, got {}'.format(
          QUERY_INITS, query_init))
    bev = dict(bev or BEVSpec().as_dict())
    self.model_config = {
        'num_classes': num_classes,
        'image_channels': image_channels,
        'bev': bev,
        'embed_dim': embed_dim,
        'heads': heads,
        'levels': levels,
        'grid_side': grid_side,
        'num_layers': num_layers,
        'query_init': query_init,
        'use_images': use_images,
        'max_queries': max_queries,
        'image_footprint': image_footprint,
        'z_range': list(z_range),
    }
    self.spec = BEVSpec(**bev)
    self.attn_cfg = DRoIAttnConfig(embed_dim=embed_dim, heads=heads,
                                   levels=levels, grid_side=grid_side)
    self.num_classes = num_classes
    self.use_images = use_images
    self.image_footprint = image_footprint

    pc_range = (self.spec.x_range[0], self.spec.y_range[0], z_range[0],
                self.spec.x_range[1], self.spec.y_range[1], z_range[1])
    if query_init == 'explicit':
      self.query_init = ExplicitQueryInit(embed_dim, num_classes, pc_range)
    else:
      self.query_init = ImplicitQueryInit(embed_dim, num_classes, pc_range,
                                          max_queries=max_queries)

    self.image_stem = nn.Sequential(
        nn.Conv2d(image_channels, embed_dim, 3, padding=1), nn.ReLU())
    self.bev_encoder = BEVEncoder(self.spec, channels=embed_dim)
    self.layers = nn.ModuleList(
        [TeacherDecoderLayer(self.attn_cfg) for _ in range(num_layers)])

    self.center_head = nn.Linear(embed_dim, 3)
    self.dims_head = nn.Linear(embed_dim, 3)
    self.yaw_head = nn.Linear(embed_dim, 2)
    self.cls_head = nn.Linear(embed_dim, num_classes)
    nn.init.constant_(self.center_head.weight, 0.0)
    nn.init.constant_(self.center_head.bias, 0.0)
    nn.init.constant_(self.dims_head.bias, 0.0)
    nn.init.constant_(self.cls_head.bias, -2.19)

    offsets = make_roi_grid(np.zeros(2), grid_side, 1.0).points
    self.register_buffer('bev_grid_offsets',
                         torch.as_tensor(offsets, dtype=torch.float32),
                         persistent=False)

  @property
  def device(self):
    return self.center_head.weight.device

  @property
  def dtype(self):
    return self.center_head.weight.dtype

  def _pyramid(self, feat):
    return [
        feat if l == 0 else F.avg_pool2d(feat, 2**l)
        for l in range(self.attn_cfg.levels)
    ]

  def _image_inputs(self, image_feats, calibs, reference):
    n = reference.shape[0]
    P = self.attn_cfg.num_points
    K = self.attn_cfg.grid_side
    grid = np.zeros((n, P, 2))
    index = np.zeros(n, dtype=np.int64)
    visible = np.zeros(n, dtype=bool)
    pyramid, size = None, (1, 1)

    if image_feats is not None and len(calibs) > 0:
      pyramid = self._pyramid(image_feats)
      size = tuple(image_feats.shape[-2:])
      ref = reference.detach().cpu().double().numpy()
      for i in range(n):
        sel = select_view(ref[i], calibs)
        if sel is None:
          continue
        j, u, v = sel
        depth = project_lidar_to_camera(ref[i], calibs[j])[2]
        spacing = image_grid_spacing(depth, calibs[j].K[0, 0], K,
                                     self.image_footprint)
        grid[i] = make_roi_grid((u, v), K, spacing).points
        index[i] = j
        visible[i] = True

    return {
        'pyramid': pyramid,
        'grid': torch.as_tensor(grid, dtype=self.dtype, device=self.device),
        'size': size,
        'index': torch.as_tensor(index, device=self.device),
        'visible': torch.as_tensor(visible, device=self.device),
    }

  def _bev_inputs(self, bev_feat, reference):
    spec = self.spec
    cols = (reference[:, 0] - spec.x_range[0]) / spec.resolution
    rows = (reference[:, 1] - spec.y_range[0]) / spec.resolution
    grid = torch.stack([cols, rows], dim=1)[:, None, :] + self.bev_grid_offsets
    return {
        'pyramid': self._pyramid(bev_feat),
        'grid': grid,
        'size': (spec.H, spec.W)
    }

  def decode(self, content, reference):
    """Maps decoded query features to box parameters.

    Args:
      content: Tensor [N, D].
      reference: Tensor [N, 3].

    Returns:
      A TeacherOutput.
    """
    return TeacherOutput(center=reference + self.center_head(content),
                         log_dims=self.dims_head(content),
                         sincos=self.yaw_head(content),
                         logits=self.cls_head(content))

  def encode(self, points, images, calibs):
    """Computes the level-0 feature maps of both modalities.

    Args:
      points: An [N_pts, 3] ndarray.
      images: A [V, C, H, W] ndarray or None.
      calibs: A list of V CameraCalib.

    Returns:
      image_feats: Tensor [V, D, H, W], or None without cameras.
      bev_feat: Tensor [1, D, H_bev, W_bev].
    """
    image_feats = None
    if images is not None and len(calibs) > 0:
      image_feats = self.image_stem(
          torch.as_tensor(np.asarray(images), dtype=self.dtype,
                          device=self.device))
      if not self.use_images:
        image_feats = torch.zeros_like(image_feats)
    bev_feat = self.bev_encoder(
        [points_to_tensor(points, self.device, self.dtype)])
    return image_feats, bev_feat

  def decode_features(self, image_feats, bev_feat, calibs, annotations):
    """Runs the query decoder on precomputed feature maps.

    Args:
      image_feats: Tensor [V, D, H, W] or None.
      bev_feat: Tensor [1, D, H_bev, W_bev].
      calibs: A list of V CameraCalib.
      annotations: A list of N PointAnnotation.

    Returns:
      A TeacherOutput with N rows, in annotation order.
    """
    positions, categories = annotations_to_tensors(annotations, self.device,
                                                   self.dtype)
    content, reference = self.query_init(positions, categories)
    if len(annotations) == 0:
      return self.decode(content, reference)
    image = self._image_inputs(image_feats, calibs, reference)
    bev = self._bev_inputs(bev_feat, reference)
    for layer in self.layers:
      content = layer(content, image, bev)
    return self.decode(content, reference)

  def forward(self, points, images, calibs, annotations):
    """Forward function.

    Args:
      points: An [N_pts, 3] ndarray.
      images: A [V, C, H, W] ndarray or None.
      calibs: A list of V CameraCalib.
      annotations: A list of N PointAnnotation.

    Returns:
      A TeacherOutput with N rows, in annotation order.
    """
    if len(annotations) == 0:
      return self.decode_features(None, None, calibs, annotations)
    image_feats, bev_feat = self.encode(points, images, calibs)
    return self.decode_features(image_feats, bev_feat, calibs, annotations)

  def forward_scene(self, scene):
    return self(scene.points, scene.images, scene.calibs, scene.annotations)


def build_teacher(model_config):
  """Rebuilds a TeacherModel from its model_config dict."""
  return TeacherModel(**model_config)


def init_queries(annotations, initializer):
  """Explicit positional queries, one per annotation in order."""
  if not isinstance(initializer, ExplicitQueryInit):
    raise TypeError('init_queries needs an ExplicitQueryInit')
  return initializer.queries(annotations)


def implicit_point_encoder_baseline(annotations, initializer):
  """Implicit queries: encoded points with learned, unbound anchors."""
  if not isinstance(initializer, ImplicitQueryInit):
    raise TypeError('implicit_point_encoder_baseline needs an ImplicitQueryInit')
  return initializer.queries(annotations)


def decode_boxes(output, categories=None):
  """Converts a TeacherOutput to TeacherPredictions.

  Args:
    output: A TeacherOutput.
    categories: Optional per-query categories overriding the argmax.

  Returns:
    A list of TeacherPrediction; box scores are softmax probabilities of the
    box category.
  """
  center = output.center.detach().cpu().double().numpy()
  dims = output.dims.detach().cpu().double().numpy()
  yaw = output.yaw.detach().cpu().double().numpy()
  logits = output.logits.detach().cpu().double()
  probs = torch.softmax(logits, dim=-1).numpy()
  logits = logits.numpy()
  preds = []
  for i in range(len(output)):
    cat = int(np.argmax(logits[i])) if categories is None else int(categories[i])
    box = Box3D(center=center[i], dims=dims[i], yaw=yaw[i], category=cat,
                score=float(np.clip(probs[i, cat], 0.0, 1.0)))
    preds.append(TeacherPrediction(box=box, logits=logits[i]))
  return preds


def one_to_one_assign(predictions, gt_boxes):
  """Pairs query i with ground truth i.

  Raises:
    ValueError: If the counts differ.
  """
  if len(predictions) != len(gt_boxes):
    raise ValueError('{} predictions for {} ground-truth boxes'.format(
        len(predictions), len(gt_boxes)))
  return [(i, i) for i in range(len(gt_boxes))]


def boxes_to_targets(boxes, device=None, dtype=torch.float32):
  """Stacks boxes into center [N, 3], log dims [N, 3], sincos [N, 2], cat [N]."""
  center = torch.as_tensor(np.stack([b.center for b in boxes]), dtype=dtype,
                           device=device)
  log_dims = torch.as_tensor(np.log(np.stack([b.dims for b in boxes])),
                             dtype=dtype, device=device)
  yaw = np.array([b.yaw for b in boxes])
  sincos = torch.as_tensor(np.stack([np.sin(yaw), np.cos(yaw)], axis=1),
                           dtype=dtype, device=device)
  cats = torch.as_tensor([b.category for b in boxes], dtype=torch.long,
                         device=device)
  return center, log_dims, sincos, cats


def sigmoid_focal_loss(logits, targets, alpha=0.25, gamma=2.0):
  """Per-element sigmoid focal loss; same shape as logits."""
  p = torch.sigmoid(logits)
  ce = F.binary_cross_entropy_with_logits(logits, targets, reduction='none')
  p_t = p * targets + (1 - p) * (1 - targets)
  loss = ce * (1 - p_t)**gamma
  alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
  return alpha_t * loss


def teacher_loss(output, gt_boxes, pairing, lambda_box=1.0, lambda_cls=1.0):
  """L1 box loss plus sigmoid focal classification loss.

  The box term sums |pred - gt| over center, log dims, sin and cos of each
  pair and averages over pairs. The focal term sums over categories and
  averages over pairs.

  Args:
    output: A TeacherOutput.
    gt_boxes: A list of Box3D.
    pairing: A list of (query index, gt index).
    lambda_box: Box loss weight.
    lambda_cls: Classification loss weight.

  Returns:
    total: A scalar tensor.
    terms: A dict with 'loss_box' and 'loss_cls', already weighted.
  """
  if len(pairing) == 0:
    zero = output.center.sum() * 0.0
    return zero, {'loss_box': zero, 'loss_cls': zero}
  device = output.center.device
  qi = torch.as_tensor([p[0] for p in pairing], dtype=torch.long, device=device)
  boxes = [gt_boxes[p[1]] for p in pairing]
  center, log_dims, sincos, cats = boxes_to_targets(boxes, device,
                                                    output.center.dtype)

  pred = torch.cat([output.center[qi], output.log_dims[qi], output.sincos[qi]],
                   dim=1)
  target = torch.cat([center, log_dims, sincos], dim=1)
  loss_box = (pred - target).abs().sum(1).mean()

  onehot = F.one_hot(cats, output.logits.shape[1]).to(output.logits.dtype)
  loss_cls = sigmoid_focal_loss(output.logits[qi], onehot).sum(1).mean()

  loss_box = lambda_box * loss_box
  loss_cls = lambda_cls * loss_cls
  return loss_box + loss_cls, {'loss_box': loss_box, 'loss_cls': loss_cls}


def teacher_train_step(model, optimizer, scenes, lambda_box=1.0,
                       lambda_cls=1.0):
  """Runs one optimization step over a batch of labeled scenes.

  Args:
    model: A TeacherModel.
    optimizer: A torch optimizer over model's parameters.
    scenes: A list of Scene whose annotations pair with their boxes.
    lambda_box: Box loss weight.
    lambda_cls: Classification loss weight.

  Returns:
    A dict of float loss terms averaged over scenes with annotations.
  """
  model.train()
  optimizer.zero_grad()
  totals, boxes, clss = [], [], []
  for scene in scenes:
    if len(scene.annotations) == 0:
      continue
    output = model.forward_scene(scene)
    pairing = one_to_one_assign(output, scene.boxes)
    total, terms = teacher_loss(output, scene.boxes, pairing, lambda_box,
                                lambda_cls)
    totals.append(total)
    boxes.append(terms['loss_box'])
    clss.append(terms['loss_cls'])
  if not totals:
    return {'loss': 0.0, 'loss_box': 0.0, 'loss_cls': 0.0}
  loss = torch.stack(totals).mean()
  loss.backward()
  optimizer.step()
  return {
      'loss': float(loss),
      'loss_box': float(torch.stack(boxes).mean()),
      'loss_cls': float(torch.stack(clss).mean()),
  }


def predict_scene(model, scene):
  """Boxes for every annotation of a scene, categories forced."""
  model.eval()
  with torch.no_grad():
    output = model.forward_scene(scene)
  cats = [a.category for a in scene.annotations]
  return [p.box for p in decode_boxes(output, categories=cats)]


class PseudoLabelSet():
  """Teacher boxes keyed by weak scene id, in scene order."""

  def __init__(self):
    self._labels = {}

  def __len__(self):
    return len(self._labels)

  def __iter__(self):
    return iter(self._labels.items())

  def add(self, scene_id, boxes):
    if scene_id in self._labels:
      raise KeyError('duplicate scene id: {}'.format(scene_id))
    self._labels[scene_id] = list(boxes)

  def boxes(self, scene_id):
    return self._labels[scene_id]

  def scene_ids(self):
    return list(self._labels)

  def save(self, path):
    """Writes one {scene_id, boxes} record per line; boxes carry scores."""
    save_jsonl(path, [{
        'scene_id': sid,
        'boxes': boxes_to_records(boxes),
    } for sid, boxes in self._labels.items()])

  @classmethod
  def load(cls, path):
    labels = cls()
    for rec in load_jsonl(path):
      labels.add(rec['scene_id'], records_to_boxes(rec['boxes']))
    return labels


def generate_pseudo_labels(model, weak_scenes):
  """Labels every annotation of every weak scene with one box.

  Args:
    model: A trained TeacherModel.
    weak_scenes: An iterable of WeakScene.

  Returns:
    A PseudoLabelSet with one entry per scene and one box per annotation.
  """
  labels = PseudoLabelSet()
  for scene in weak_scenes:
    labels.add(scene.scene_id, predict_scene(model, scene))
  logger.info('generated pseudo labels for {} scenes'.format(len(labels)))
  return labels
