# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Instance-level fusion of image and LiDAR query features."""

import math

import torch
import torch.nn as nn

from torch.nn import Module


class InstanceFusion(Module):
  """Single-head attention from the LiDAR feature to {image, LiDAR}.

  The attended mixture is added to the LiDAR feature and refined by a
  residual two-layer feed-forward block.
  """

  def __init__(self, embed_dim, ffn_dim=None):
    super(InstanceFusion, self).__init__()
    ffn_dim = ffn_dim or 2 * embed_dim
    self._scale = 1.0 / math.sqrt(embed_dim)
    self.q_proj = nn.Linear(embed_dim, embed_dim)
    self.k_proj = nn.Linear(embed_dim, embed_dim)
    self.v_proj = nn.Linear(embed_dim, embed_dim)
    self.out_proj = nn.Linear(embed_dim, embed_dim)
    self.ffn = nn.Sequential(nn.Linear(embed_dim, ffn_dim), nn.ReLU(),
                             nn.Linear(ffn_dim, embed_dim))

  def attention(self, f_img, f_lidar, image_mask=None):
    """Returns the [N, 2] weights over (image, LiDAR).

    Args:
      f_img: Tensor [N, D].
      f_lidar: Tensor [N, D].
      image_mask: Optional bool tensor [N]; True drops the image key.
    """
    q = self.q_proj(f_lidar)
    k = self.k_proj(torch.stack([f_img, f_lidar], dim=1))
    logits = (q[:, None, :] * k).sum(-1) * self._scale
    if image_mask is not None:
      drop = torch.stack([image_mask, torch.zeros_like(image_mask)], dim=1)
      logits = logits.masked_fill(drop, float('-inf'))
    return logits.softmax(-1)

  def forward(self, f_img, f_lidar, image_mask=None):
    """Forward function.

    Args:
      f_img: Tensor [N, D] of image features.
      f_lidar: Tensor [N, D] of LiDAR features.
      image_mask: Optional bool tensor [N]; True where the instance has no
        image evidence.

    Returns:
      A tensor of shape [N, D].
    """
    alpha = self.attention(f_img, f_lidar, image_mask)
    v = self.v_proj(torch.stack([f_img, f_lidar], dim=1))
    mixed = self.out_proj((alpha[..., None] * v).sum(1))
    x = f_lidar + mixed
    return x + self.ffn(x)
