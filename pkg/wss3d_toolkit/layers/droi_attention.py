# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Deformable RoI cross-attention over multi-level feature maps."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from torch.nn import Module


@dataclass(frozen=True)
class DRoIAttnConfig:
  """Shape of a DRoICrossAttention layer.

  Attributes:
    embed_dim: Query and value width D.
    heads: Number of attention heads M; must divide embed_dim.
    levels: Number of feature levels L.
    grid_side: RoI grid side K; K * K reference points per query.
  """
  embed_dim: int = 32
  heads: int = 4
  levels: int = 2
  grid_side: int = 4

  def __post_init__(self):
    if self.embed_dim % self.heads != 0:
      raise ValueError('embed_dim {} is not divisible by heads {}'.format(
          self.embed_dim, self.heads))
    if self.levels < 1 or self.grid_side < 1:
      raise ValueError('levels and grid_side must be >= 1')

  @property
  def num_points(self):
    return self.grid_side * self.grid_side


def ms_deform_attn_sample(values, locations, weights):
  """Bilinearly samples every level and mixes the levels per head.

  Args:
    values: A list of L tensors, each [B, M, Dh, H_l, W_l].
    locations: Tensor [B, Q, M, L, 2] of (x, y) in [0, 1]; (0, 0) is the top
      left corner of the map and (1, 1) the bottom right one.
    weights: Tensor [B, Q, M, L], normalized over L.

  Returns:
    A tensor of shape [B, Q, M * Dh]. Samples outside a map read zero.
  """
  B, Q, M, L, _ = locations.shape
  Dh = values[0].shape[2]
  grids = 2 * locations - 1
  sampled = []
  for level, value in enumerate(values):
    # B, M, Dh, H, W -> B*M, Dh, H, W
    value_l = value.flatten(0, 1)
    # B, Q, M, 2 -> B*M, Q, 1, 2
    grid_l = grids[:, :, :, level].permute(0, 2, 1, 3).flatten(0, 1)[:, :, None]
    # B*M, Dh, Q, 1
    sampled.append(
        F.grid_sample(value_l, grid_l, mode='bilinear', padding_mode='zeros',
                      align_corners=False))
  # B*M, Dh, Q, L
  sampled = torch.cat(sampled, dim=-1)
  # B, Q, M, L -> B*M, 1, Q, L
  w = weights.permute(0, 2, 1, 3).flatten(0, 1)[:, None]
  out = (sampled * w).sum(-1).view(B, M * Dh, Q)
  return out.transpose(1, 2)


class DRoICrossAttention(Module):
  """Cross-attention from instance queries to a K x K RoI grid.

  Each grid point k predicts per-head, per-level sampling offsets and
  attention weights from the query. The per-point outputs are projected and
  summed over the grid.
  """

  def __init__(self, cfg):
    super(DRoICrossAttention, self).__init__()
    self.cfg = cfg
    D, M, L, P = cfg.embed_dim, cfg.heads, cfg.levels, cfg.num_points
    self.value_proj = nn.Linear(D, D)
    self.sampling_offsets = nn.Linear(D, P * M * L * 2)
    self.attention_weights = nn.Linear(D, P * M * L)
    self.output_proj = nn.Linear(D, D)
    self._reset_parameters()

  def _reset_parameters(self):
    nn.init.constant_(self.sampling_offsets.weight, 0.0)
    nn.init.constant_(self.sampling_offsets.bias, 0.0)
    nn.init.constant_(self.attention_weights.weight, 0.0)
    nn.init.constant_(self.attention_weights.bias, 0.0)
    nn.init.xavier_uniform_(self.value_proj.weight)
    nn.init.constant_(self.value_proj.bias, 0.0)
    nn.init.xavier_uniform_(self.output_proj.weight)
    nn.init.constant_(self.output_proj.bias, 0.0)

  def _project_values(self, pyramid):
    """Applies value_proj per location; returns [B, M, Dh, H, W] per level."""
    M = self.cfg.heads
    out = []
    for feat in pyramid:
      B, D, H, W = feat.shape
      v = self.value_proj(feat.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
      out.append(v.reshape(B, M, D // M, H, W))
    return out

  def forward(self, query, pyramid, grid, size, batch_index=None):
    """Forward function.

    Args:
      query: Tensor [N, D] of instance queries.
      pyramid: A list of L feature maps [B, D, H_l, W_l]; level l is level 0
        downsampled by 2^l and all levels span the same extent.
      grid: Tensor [N, K*K, 2] of (x, y) reference points in level-0 units.
      size: (H_0, W_0) of level 0.
      batch_index: Long tensor [N] giving the map each query reads. None
        requires B == 1 and lets every query read the single map.

    Returns:
      A tensor of shape [N, D].
    """
    cfg = self.cfg
    N = query.shape[0]
    M, L, P = cfg.heads, cfg.levels, cfg.num_points
    if len(pyramid) != L:
      raise ValueError('expected {} feature levels, got {}'.format(
          L, len(pyramid)))
    if grid.shape[1] != P:
      raise ValueError('expected {} grid points, got {}'.format(P, grid.shape[1]))

    values = self._project_values(pyramid)
    offsets = self.sampling_offsets(query).view(N, P, M, L, 2)
    weights = self.attention_weights(query).view(N, P, M, L).softmax(-1)

    H0, W0 = size
    scale = grid.new_tensor([W0, H0])
    locations = (grid[:, :, None, None, :] + offsets) / scale

    if batch_index is None:
      if values[0].shape[0] != 1:
        raise ValueError('batch_index is required for multi-map pyramids')
      out = ms_deform_attn_sample(values, locations.reshape(1, N * P, M, L, 2),
                                  weights.reshape(1, N * P, M, L))
      out = out.view(N, P, -1)
    else:
      values = [v.index_select(0, batch_index) for v in values]
      out = ms_deform_attn_sample(values, locations, weights)

    return self.output_proj(out).sum(1)
