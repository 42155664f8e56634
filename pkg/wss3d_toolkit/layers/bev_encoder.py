# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Pillar-style BEV encoder: per-point MLP, mean scatter, conv trunk."""

import numpy as np
import torch
import torch.nn as nn

from torch.nn import Module


def points_to_tensor(points, device=None, dtype=torch.float32):
  """Converts an [N, 3] array to a tensor, float32 unless dtype says otherwise."""
  if torch.is_tensor(points):
    return points.to(dtype=dtype, device=device)
  return torch.as_tensor(np.asarray(points).reshape(-1, 3), dtype=dtype,
                         device=device)


class BEVEncoder(Module):
  """Scatters point embeddings into a BEV canvas and runs a conv trunk."""

  def __init__(self, spec, channels=32, out_channels=None, num_layers=2):
    """Constructor.

    Args:
      spec: A BEVSpec.
      channels: Width of the point embedding and the scattered canvas.
      out_channels: Output channels; defaults to channels.
      num_layers: Number of 3x3 conv + ReLU layers in the trunk; 0 gives an
        identity trunk.
    """
    super(BEVEncoder, self).__init__()
    self._spec = spec
    self._channels = channels
    out_channels = out_channels or channels

    # Input: offset from the cell center in cells (x, y) and height.
    self.point_embed = nn.Sequential(nn.Linear(3, channels), nn.ReLU())

    layers = []
    c_in = channels
    for _ in range(num_layers):
      layers += [nn.Conv2d(c_in, out_channels, 3, padding=1), nn.ReLU()]
      c_in = out_channels
    self.trunk = nn.Sequential(*layers) if layers else nn.Identity()
    self._out_channels = c_in

  @property
  def spec(self):
    return self._spec

  @property
  def out_channels(self):
    return self._out_channels

  def scatter(self, points):
    """Mean-pools point embeddings per cell.

    Args:
      points: An [N, 3] ndarray or tensor in meters.

    Returns:
      A tensor of shape [C, H, W]; empty cells are zero.
    """
    spec = self._spec
    weight = self.point_embed[0].weight
    device, dtype = weight.device, weight.dtype
    pts = points_to_tensor(points, device, dtype)
    gx = (pts[:, 0] - spec.x_range[0]) / spec.resolution
    gy = (pts[:, 1] - spec.y_range[0]) / spec.resolution
    cols = torch.floor(gx)
    rows = torch.floor(gy)
    keep = (cols >= 0) & (cols < spec.W) & (rows >= 0) & (rows < spec.H)

    canvas = torch.zeros(spec.H * spec.W, self._channels, dtype=dtype,
                         device=device)
    if keep.any():
      feats_in = torch.stack([gx - cols - 0.5, gy - rows - 0.5, pts[:, 2]],
                             dim=1)[keep]
      idx = (rows[keep] * spec.W + cols[keep]).long()
      feats = self.point_embed(feats_in)
      canvas = canvas.index_add(0, idx, feats)
      counts = torch.zeros(spec.H * spec.W, dtype=dtype, device=device).index_add(
          0, idx, torch.ones_like(idx, dtype=dtype))
      canvas = canvas / counts.clamp(min=1.0)[:, None]
    return canvas.t().reshape(self._channels, spec.H, spec.W)

  def forward(self, points_list):
    """Forward function.

    Args:
      points_list: A list of B point clouds, each [N_b, 3].

    Returns:
      A tensor of shape [B, D, H, W].
    """
    canvas = torch.stack([self.scatter(p) for p in points_list], dim=0)
    return self.trunk(canvas)
