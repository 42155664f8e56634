# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Data types: boxes, point annotations, cameras and scenes."""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .geometry import wrap_angle

CATEGORY_NAMES = ('car', 'pedestrian', 'cyclist')


@dataclass(eq=False)
class Box3D:
  """A 7-DoF box with category and confidence.

  dims are (w, l, h); length runs along the heading given by yaw.
  """
  center: np.ndarray
  dims: np.ndarray
  yaw: float
  category: int
  score: float = 1.0

  def __post_init__(self):
    self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
    self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
    if not np.all(self.dims > 0):
      raise ValueError('box dims must be positive, got {}'.format(
          self.dims.tolist()))
    if not np.all(np.isfinite(self.center)):
      raise ValueError('box center must be finite')
    self.yaw = wrap_angle(float(self.yaw))
    self.category = int(self.category)
    self.score = float(self.score)
    if not 0.0 <= self.score <= 1.0:
      raise ValueError('box score must be in [0, 1], got {}'.format(self.score))

  def to_record(self, with_score=False):
    """Flattens to [cx, cy, cz, w, l, h, yaw, category(, score)]."""
    rec = self.center.tolist() + self.dims.tolist() + [self.yaw, self.category]
    if with_score:
      rec.append(self.score)
    return rec

  @classmethod
  def from_record(cls, rec):
    rec = list(rec)
    if len(rec) not in (8, 9):
      raise ValueError('box record needs 8 or 9 fields, got {}'.format(len(rec)))
    score = rec[8] if len(rec) == 9 else 1.0
    return cls(center=rec[0:3], dims=rec[3:6], yaw=rec[6], category=int(rec[7]),
               score=score)

  def ego_distance(self):
    return float(np.hypot(self.center[0], self.center[1]))


@dataclass(eq=False)
class PointAnnotation:
  """The weak label: one interior point plus category."""
  position: np.ndarray
  category: int

  def __post_init__(self):
    self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
    self.category = int(self.category)

  def to_record(self):
    return self.position.tolist() + [self.category]

  @classmethod
  def from_record(cls, rec):
    return cls(position=rec[0:3], category=int(rec[3]))


@dataclass(eq=False)
class CameraCalib:
  """Pinhole camera: q = K (R p + t) maps LiDAR points to pixels."""
  K: np.ndarray
  R: np.ndarray
  t: np.ndarray
  width: int
  height: int

  def __post_init__(self):
    self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
    self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
    self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
    self.width = int(self.width)
    self.height = int(self.height)
    if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6):
      raise ValueError('camera rotation is not orthonormal')
    if not (np.allclose(np.tril(self.K, -1), 0.0) and self.K[0, 0] > 0 and
            self.K[1, 1] > 0):
      raise ValueError('intrinsics must be upper-triangular with positive focals')
    if self.width <= 0 or self.height <= 0:
      raise ValueError('image size must be positive')

  def as_dict(self):
    return {
        'K': self.K.ravel().tolist(),
        'R': self.R.ravel().tolist(),
        't': self.t.tolist(),
        'width': self.width,
        'height': self.height,
    }

  @classmethod
  def from_dict(cls, d):
    return cls(K=d['K'], R=d['R'], t=d['t'], width=d['width'],
               height=d['height'])


@dataclass(eq=False)
class WeakScene:
  """A scene as seen by training code on the weak split: no boxes."""
  scene_id: str
  points: np.ndarray
  images: np.ndarray
  calibs: List[CameraCalib]
  annotations: List[PointAnnotation] = field(default_factory=list)

  def __post_init__(self):
    self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
    self.images = np.asarray(self.images, dtype=np.float32)
    if self.images.ndim != 4 or self.images.shape[0] != len(self.calibs):
      raise ValueError('images must be [views, C, H, W] with one view per calib')


@dataclass(eq=False)
class Scene(WeakScene):
  """A fully labeled scene; annotations[i] belongs to boxes[i]."""
  boxes: List[Box3D] = field(default_factory=list)

  def __post_init__(self):
    super().__post_init__()
    if len(self.annotations) != len(self.boxes):
      raise ValueError('{} annotations for {} boxes'.format(
          len(self.annotations), len(self.boxes)))
    for i, (a, b) in enumerate(zip(self.annotations, self.boxes)):
      if a.category != b.category:
        raise ValueError('annotation {} has category {} but its box has {}'.format(
            i, a.category, b.category))

  def strip_boxes(self):
    """Returns the WeakScene view of this scene."""
    return WeakScene(scene_id=self.scene_id, points=self.points,
                     images=self.images, calibs=self.calibs,
                     annotations=self.annotations)
