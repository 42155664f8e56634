# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Coordinate transforms shared by the simulator, the teacher and the student.

Conventions:
  * LiDAR frame: x forward, y left, z up (meters).
  * Camera frame: x right, y down, z along the optical axis.
  * Pixel i spans [i, i + 1); continuous pixel coordinates are used throughout.
  * BEV cell (row, col) covers y in [y0 + row * res, y0 + (row + 1) * res) and
    x in [x0 + col * res, x0 + (col + 1) * res).
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import torch


class BehindCameraError(ValueError):
  """Raised when a point projects with non-positive depth."""


def wrap_angle(a):
  """Wraps angles into [-pi, pi).

  Args:
    a: A float, ndarray or tensor of angles in radians.

  Returns:
    The wrapped angles, same type as the input. Angles already in range are
    returned unchanged.
  """
  two_pi = 2.0 * math.pi
  if torch.is_tensor(a):
    w = torch.remainder(a + math.pi, two_pi) - math.pi
    w = torch.where(w >= math.pi, w - two_pi, w)
    return torch.where((a >= -math.pi) & (a < math.pi), a, w)
  a = np.asarray(a, dtype=np.float64)
  w = np.mod(a + math.pi, two_pi) - math.pi
  w = np.where(w >= math.pi, w - two_pi, w)
  w = np.where((a >= -math.pi) & (a < math.pi), a, w)
  if np.ndim(w) == 0:
    return float(w)
  return w


def yaw_rotation(yaw):
  """Returns the 3x3 rotation about z by yaw."""
  c, s = math.cos(yaw), math.sin(yaw)
  return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(box):
  """Computes the 8 corners of a box.

  Args:
    box: A Box3D.

  Returns:
    An ndarray of shape [8, 3].
  """
  w, l, h = box.dims
  # Length runs along the heading direction.
  signs = np.array(list(itertools.product((-1, 1), repeat=3)), dtype=np.float64)
  local = signs * np.array([l, w, h]) / 2.0
  return local @ yaw_rotation(box.yaw).T + box.center


def to_box_frame(points, box):
  """Expresses LiDAR points in the box frame (x along length, y along width)."""
  points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
  return (points - box.center) @ yaw_rotation(box.yaw)


def points_in_box(points, box, tol=0.0):
  """Tests which points lie inside a box.

  Args:
    points: An ndarray of shape [N, 3].
    box: A Box3D.
    tol: Slack added to every half extent.

  Returns:
    A bool ndarray of shape [N].
  """
  local = to_box_frame(points, box)
  w, l, h = box.dims
  half = np.array([l, w, h]) / 2.0 + tol
  return np.all(np.abs(local) <= half, axis=1)


def project_points(points, calib):
  """Projects LiDAR points into a camera without visibility checks.

  Args:
    points: An ndarray of shape [N, 3].
    calib: A CameraCalib.

  Returns:
    uv: An ndarray of shape [N, 2] with pixel coordinates.
    depth: An ndarray of shape [N] with camera depths. Entries with
      depth <= 0 have meaningless uv.
  """
  points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
  q = (points @ calib.R.T + calib.t) @ calib.K.T
  depth = q[:, 2]
  safe = np.where(np.abs(depth) > 0, depth, 1.0)
  uv = q[:, :2] / safe[:, None]
  return uv, depth


def project_lidar_to_camera(p3d, calib):
  """Projects one LiDAR point into a camera with perspective division.

  Args:
    p3d: A 3-vector in meters.
    calib: A CameraCalib.

  Returns:
    A tuple (u, v, depth).

  Raises:
    BehindCameraError: If the depth is not positive.
  """
  p = np.asarray(p3d, dtype=np.float64).reshape(3)
  q = calib.K @ (calib.R @ p + calib.t)
  if q[2] <= 0:
    raise BehindCameraError('point {} is behind the camera (depth {:.4f})'.format(
        p.tolist(), q[2]))
  return float(q[0] / q[2]), float(q[1] / q[2]), float(q[2])


def unproject(u, v, depth, calib):
  """Inverts project_lidar_to_camera.

  Returns:
    The LiDAR-frame point as an ndarray of shape [3].
  """
  ray = np.linalg.solve(calib.K, np.array([u * depth, v * depth, depth]))
  return calib.R.T @ (ray - calib.t)


def select_view(p3d, calibs):
  """Picks the camera in which a point projects closest to the image center.

  Ties go to the lowest view index.

  Args:
    p3d: A 3-vector in meters.
    calibs: A list of CameraCalib.

  Returns:
    A tuple (view index, u, v), or None if no view contains the point.
  """
  best = None
  best_dist = math.inf
  for j, calib in enumerate(calibs):
    try:
      u, v, _ = project_lidar_to_camera(p3d, calib)
    except BehindCameraError:
      continue
    if not (0.0 <= u < calib.width and 0.0 <= v < calib.height):
      continue
    dist = math.hypot(u - calib.width / 2.0, v - calib.height / 2.0)
    if dist < best_dist:
      best, best_dist = (j, u, v), dist
  return best


@dataclass
class RoIGrid:
  """K x K reference points centered on a projected annotation."""
  center: np.ndarray
  points: np.ndarray
  K: int


def make_roi_grid(center, K, spacing):
  """Builds a square grid of K * K reference points.

  Args:
    center: A 2-vector in pixels or cells.
    K: Grid side length.
    spacing: Distance between neighbouring points.

  Returns:
    A RoIGrid whose points are ordered row-major over (i, j).

  Raises:
    ValueError: If K < 1 or spacing <= 0.
  """
  if K < 1:
    raise ValueError('grid side must be >= 1, got {}'.format(K))
  if spacing <= 0:
    raise ValueError('grid spacing must be positive, got {}'.format(spacing))
  center = np.asarray(center, dtype=np.float64).reshape(2)
  offsets = (np.arange(K) - (K - 1) / 2.0) * spacing
  oi, oj = np.meshgrid(offsets, offsets, indexing='ij')
  points = center + np.stack([oi.ravel(), oj.ravel()], axis=1)
  return RoIGrid(center=center, points=points, K=K)


def image_grid_spacing(depth, focal, K, footprint=2.0):
  """Pixel spacing giving a constant metric footprint at the given depth."""
  return footprint * focal / (max(depth, 1e-6) * K)


@dataclass(frozen=True)
class BEVSpec:
  """Metric extent and resolution of a bird's-eye-view grid."""
  x_range: Tuple[float, float] = (-50.0, 50.0)
  y_range: Tuple[float, float] = (-50.0, 50.0)
  resolution: float = 1.0
  H: int = field(init=False)
  W: int = field(init=False)

  def __post_init__(self):
    if self.resolution <= 0:
      raise ValueError('resolution must be positive')
    h = (self.y_range[1] - self.y_range[0]) / self.resolution
    w = (self.x_range[1] - self.x_range[0]) / self.resolution
    if h <= 0 or w <= 0 or not (math.isclose(h, round(h)) and
                                math.isclose(w, round(w))):
      raise ValueError(
          'BEV extents {} x {} are not a positive multiple of {}'.format(
              self.x_range, self.y_range, self.resolution))
    object.__setattr__(self, 'x_range', tuple(float(x) for x in self.x_range))
    object.__setattr__(self, 'y_range', tuple(float(y) for y in self.y_range))
    object.__setattr__(self, 'H', int(round(h)))
    object.__setattr__(self, 'W', int(round(w)))

  def as_dict(self):
    return {
        'x_range': list(self.x_range),
        'y_range': list(self.y_range),
        'resolution': self.resolution,
    }


def bev_project_points(points, spec):
  """Vectorized bev_project.

  Args:
    points: An ndarray of shape [N, >=2].
    spec: A BEVSpec.

  Returns:
    rows: An ndarray of shape [N] with continuous row coordinates.
    cols: An ndarray of shape [N] with continuous column coordinates.
    in_range: A bool ndarray of shape [N].
  """
  points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
  cols = (points[:, 0] - spec.x_range[0]) / spec.resolution
  rows = (points[:, 1] - spec.y_range[0]) / spec.resolution
  in_range = (cols >= 0) & (cols < spec.W) & (rows >= 0) & (rows < spec.H)
  return rows, cols, in_range


def bev_project(p3d, spec):
  """Maps a metric point to continuous BEV cell coordinates.

  Returns:
    A tuple (row, col, in_range). Out-of-range points are not clamped.
  """
  rows, cols, in_range = bev_project_points(np.asarray(p3d).reshape(1, -1), spec)
  return float(rows[0]), float(cols[0]), bool(in_range[0])


def cell_center(row, col, spec):
  """Returns the metric (x, y) of a cell center."""
  return (spec.x_range[0] + (col + 0.5) * spec.resolution,
          spec.y_range[0] + (row + 0.5) * spec.resolution)


def gaussian_bev_mask(annotations, spec, sigma=2.0):
  """Renders the point-guided Gaussian mask.

  Args:
    annotations: A list of PointAnnotation.
    spec: A BEVSpec.
    sigma: Gaussian standard deviation in cells.

  Returns:
    A float32 ndarray of shape [H, W]: the elementwise max of one Gaussian per
    annotation, evaluated at cell centers.
  """
  if sigma <= 0:
    raise ValueError('sigma must be positive, got {}'.format(sigma))
  mask = np.zeros((spec.H, spec.W), dtype=np.float64)
  if len(annotations) == 0:
    return mask.astype(np.float32)
  pos = np.stack([a.position for a in annotations])
  rows, cols, _ = bev_project_points(pos, spec)
  rc = np.arange(spec.H, dtype=np.float64)[:, None] + 0.5
  cc = np.arange(spec.W, dtype=np.float64)[None, :] + 0.5
  for r, c in zip(rows, cols):
    d2 = (rc - r)**2 + (cc - c)**2
    np.maximum(mask, np.exp(-d2 / (2.0 * sigma**2)), out=mask)
  return mask.astype(np.float32)


@dataclass(frozen=True)
class BEVAugmentation:
  """An exact cell permutation of a BEV map: flips then quarter turns."""
  flip_x: bool = False
  flip_y: bool = False
  rot90: int = 0

  def __post_init__(self):
    if self.rot90 not in (0, 1, 2, 3):
      raise ValueError('rot90 must be in {0, 1, 2, 3}, got %r' % (self.rot90,))

  @property
  def is_identity(self):
    return not self.flip_x and not self.flip_y and self.rot90 == 0

  def matrix(self):
    """Signed permutation acting on centered (col, row) coordinates."""
    m = np.eye(2, dtype=np.int64)
    if self.flip_x:
      m = np.diag([-1, 1]) @ m
    if self.flip_y:
      m = np.diag([1, -1]) @ m
    turn = np.array([[0, 1], [-1, 0]], dtype=np.int64)
    for _ in range(self.rot90):
      m = turn @ m
    return m

  @staticmethod
  def all():
    """Enumerates the 16 augmentations."""
    return [
        BEVAugmentation(fx, fy, k)
        for fx in (False, True)
        for fy in (False, True)
        for k in range(4)
    ]

  @staticmethod
  def sample(rng, rotate=True):
    """Draws a random augmentation; rotate=False restricts to flips."""
    return BEVAugmentation(flip_x=bool(rng.integers(2)),
                           flip_y=bool(rng.integers(2)),
                           rot90=int(rng.integers(4)) if rotate else 0)


def compose_augmentations(first, second):
  """Returns the augmentation equal to applying first and then second.

  Distinct augmentations can act identically (e.g. both flips equal a half
  turn); the first match in BEVAugmentation.all() order is returned.
  """
  target = second.matrix() @ first.matrix()
  for cand in BEVAugmentation.all():
    if np.array_equal(cand.matrix(), target):
      return cand
  raise AssertionError('augmentation group is not closed')


def _check_square(x, aug):
  if aug.rot90 % 2 == 1 and x.shape[-2] != x.shape[-1]:
    raise ValueError(
        'odd quarter turns need a square map, got {}x{}'.format(
            x.shape[-2], x.shape[-1]))


def _flip(x, axis):
  if torch.is_tensor(x):
    return torch.flip(x, dims=(axis,))
  return np.flip(x, axis=axis)


def _rot(x, k):
  if k % 4 == 0:
    return x
  if torch.is_tensor(x):
    return torch.rot90(x, k, dims=(-2, -1))
  return np.rot90(x, k, axes=(x.ndim - 2, x.ndim - 1))


def apply_bev_augmentation(x, aug):
  """Applies an augmentation to the last two (H, W) axes of a map.

  Args:
    x: An ndarray or tensor of shape [..., H, W].
    aug: A BEVAugmentation.

  Returns:
    The permuted map, same type as the input.
  """
  _check_square(x, aug)
  if aug.flip_x:
    x = _flip(x, -1)
  if aug.flip_y:
    x = _flip(x, -2)
  x = _rot(x, aug.rot90)
  if not torch.is_tensor(x):
    x = np.ascontiguousarray(x)
  return x


def invert_bev_augmentation(x, aug):
  """Undoes apply_bev_augmentation exactly."""
  _check_square(x, aug)
  x = _rot(x, -aug.rot90)
  if aug.flip_y:
    x = _flip(x, -2)
  if aug.flip_x:
    x = _flip(x, -1)
  if not torch.is_tensor(x):
    x = np.ascontiguousarray(x)
  return x


def augment_points(points, aug, spec):
  """Moves points so that their scatter matches the augmented BEV map.

  Args:
    points: An ndarray of shape [N, 3].
    aug: A BEVAugmentation.
    spec: A BEVSpec; must be square when aug has an odd quarter turn.

  Returns:
    An ndarray of shape [N, 3].
  """
  if aug.rot90 % 2 == 1 and spec.H != spec.W:
    raise ValueError('odd quarter turns need a square BEV grid')
  points = np.array(points, dtype=np.float64).reshape(-1, 3)
  cx = (spec.x_range[0] + spec.x_range[1]) / 2.0
  cy = (spec.y_range[0] + spec.y_range[1]) / 2.0
  xy = points[:, :2] - np.array([cx, cy])
  xy = xy @ aug.matrix().T.astype(np.float64)
  points[:, 0] = xy[:, 0] + cx
  points[:, 1] = xy[:, 1] + cy
  return points
