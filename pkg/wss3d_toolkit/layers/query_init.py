# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Instance query initialization from point annotations."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from torch.nn import Module


@dataclass
class QueryState:
  """One decoder query.

  Attributes:
    content: Tensor [D].
    reference: Tensor [3], the metric anchor of the box center.
    category_hint: The annotated category, or None.
  """
  content: torch.Tensor
  reference: torch.Tensor
  category_hint: Optional[int] = None


def annotations_to_tensors(annotations, device=None, dtype=torch.float32):
  """Stacks annotations into positions [N, 3] of dtype and categories [N]."""
  if len(annotations) == 0:
    return (torch.zeros(0, 3, dtype=dtype, device=device),
            torch.zeros(0, dtype=torch.long, device=device))
  pos = np.stack([a.position for a in annotations])
  cats = np.array([a.category for a in annotations], dtype=np.int64)
  return (torch.as_tensor(pos, dtype=dtype, device=device),
          torch.as_tensor(cats, device=device))


def sine_position_encoding(positions, dim, pc_range, temperature=10000.0):
  """Sinusoidal encoding of metric positions.

  Each coordinate is normalized to [0, 1] over pc_range and scaled by 2 pi,
  then encoded with interleaved sin/cos at geometric frequencies. The
  per-axis encodings are concatenated and truncated to dim.

  Args:
    positions: Tensor [N, 3].
    dim: Output width.
    pc_range: (x_min, y_min, z_min, x_max, y_max, z_max).
    temperature: Frequency base.

  Returns:
    A tensor of shape [N, dim].
  """
  feats = int(math.ceil(dim / 6.0)) * 2
  lo = positions.new_tensor(pc_range[:3])
  hi = positions.new_tensor(pc_range[3:])
  pos = (positions - lo) / (hi - lo) * (2 * math.pi)
  dim_t = torch.arange(feats, dtype=positions.dtype, device=positions.device)
  dim_t = temperature**(2 * torch.div(dim_t, 2, rounding_mode='floor') / feats)
  enc = pos[:, :, None] / dim_t
  enc = torch.stack([enc[:, :, 0::2].sin(), enc[:, :, 1::2].cos()],
                    dim=3).flatten(1)
  return enc[:, :dim]


class ExplicitQueryInit(Module):
  """Content = category embedding + position encoding; anchor = annotation."""

  def __init__(self, embed_dim, num_classes, pc_range):
    super(ExplicitQueryInit, self).__init__()
    self.embed_dim = embed_dim
    self.pc_range = tuple(pc_range)
    self.category_embed = nn.Embedding(num_classes, embed_dim)

  def category_component(self, categories):
    return self.category_embed(categories)

  def position_component(self, positions):
    return sine_position_encoding(positions, self.embed_dim, self.pc_range)

  def forward(self, positions, categories):
    """Forward function.

    Args:
      positions: Tensor [N, 3] of annotated points.
      categories: Long tensor [N].

    Returns:
      content: Tensor [N, D].
      reference: Tensor [N, 3], equal to positions.
    """
    content = (self.category_component(categories) +
               self.position_component(positions))
    return content, positions.detach().clone()

  def queries(self, annotations):
    """Builds one QueryState per annotation."""
    weight = self.category_embed.weight
    positions, categories = annotations_to_tensors(annotations, weight.device,
                                                   weight.dtype)
    content, reference = self(positions, categories)
    return [
        QueryState(content=content[i], reference=reference[i],
                   category_hint=int(categories[i]))
        for i in range(len(annotations))
    ]


class ImplicitQueryInit(Module):
  """Baseline: an MLP encodes the annotation and anchors are learned.

  The point only reaches the query through the MLP; the box center is
  predicted relative to a learnable reference that ignores the annotation.
  """

  def __init__(self, embed_dim, num_classes, pc_range, max_queries=64):
    super(ImplicitQueryInit, self).__init__()
    self.num_classes = num_classes
    self.pc_range = tuple(pc_range)
    self.max_queries = max_queries
    self.encoder = nn.Sequential(nn.Linear(2 + num_classes, embed_dim),
                                 nn.ReLU(), nn.Linear(embed_dim, embed_dim))
    lo = torch.tensor(self.pc_range[:3])
    hi = torch.tensor(self.pc_range[3:])
    self.reference = nn.Parameter(lo + torch.rand(max_queries, 3) * (hi - lo))

  def forward(self, positions, categories):
    n = positions.shape[0]
    if n > self.max_queries:
      raise ValueError('{} annotations exceed max_queries={}'.format(
          n, self.max_queries))
    lo = positions.new_tensor(self.pc_range[:2])
    hi = positions.new_tensor(self.pc_range[3:5])
    xy = (positions[:, :2] - lo) / (hi - lo)
    onehot = F.one_hot(categories, self.num_classes).to(positions.dtype)
    content = self.encoder(torch.cat([xy, onehot], dim=1))
    return content, self.reference[:n]

  def queries(self, annotations):
    positions, categories = annotations_to_tensors(
        annotations, self.reference.device, self.reference.dtype)
    content, reference = self(positions, categories)
    return [
        QueryState(content=content[i], reference=reference[i],
                   category_hint=int(categories[i]))
        for i in range(len(annotations))
    ]
