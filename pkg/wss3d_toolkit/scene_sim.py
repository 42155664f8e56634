# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Procedural scenes, weak point annotations and sequential splits."""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np

from .geometry import box_corners, project_points, yaw_rotation
from .structures import Box3D, CameraCalib, PointAnnotation, Scene

logger = logging.getLogger(__name__)

# Mean (w, l, h) per category.
_CATEGORY_DIMS = np.array([
    [1.9, 4.5, 1.6],
    [0.7, 0.7, 1.8],
    [0.8, 1.8, 1.6],
])

_SEED_STREAMS = {'train': 0, 'val': 1, 'test': 2}


@dataclass
class SceneConfig:
  """Knobs of the procedural scene generator."""
  num_objects: int = 8
  min_range: float = 5.0
  max_range: float = 48.0
  min_separation: float = 4.0
  num_cameras: int = 6
  camera_hfov: float = 70.0
  image_width: int = 64
  image_height: int = 32
  base_density: float = 40000.0
  num_background_points: int = 200
  num_categories: int = 3
  ground_z: float = -1.7
  dim_jitter: float = 0.15

  def __post_init__(self):
    if self.num_cameras < 0 or self.num_objects < 0:
      raise ValueError('object and camera counts must be non-negative')
    if self.num_cameras == 0 and self.base_density <= 0:
      raise ValueError(
          'a scene with no cameras and no points carries no signal')
    if not 0 < self.min_range <= self.max_range:
      raise ValueError('need 0 < min_range <= max_range')
    if not 1 <= self.num_categories <= len(_CATEGORY_DIMS):
      raise ValueError('num_categories must be in [1, {}]'.format(
          len(_CATEGORY_DIMS)))

  @property
  def num_channels(self):
    """Raster channels: one per category plus normalized depth."""
    return self.num_categories + 1

  def as_dict(self):
    return asdict(self)


def scene_seed(master_seed, split, index):
  """Derives an independent per-scene seed for a split's seed stream."""
  seq = np.random.SeedSequence([int(master_seed), _SEED_STREAMS[split],
                                int(index)])
  return int(seq.generate_state(1)[0])


def make_camera_rig(config):
  """Builds num_cameras pinhole cameras evenly spaced in heading.

  Returns:
    A list of CameraCalib, view j looking along heading 2 * pi * j / n.
  """
  w, h = config.image_width, config.image_height
  f = (w / 2.0) / math.tan(math.radians(config.camera_hfov) / 2.0)
  K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
  calibs = []
  for j in range(config.num_cameras):
    psi = 2.0 * math.pi * j / config.num_cameras
    R = np.array([
        [math.sin(psi), -math.cos(psi), 0.0],
        [0.0, 0.0, -1.0],
        [math.cos(psi), math.sin(psi), 0.0],
    ])
    calibs.append(CameraCalib(K=K, R=R, t=np.zeros(3), width=w, height=h))
  return calibs


def sample_point_annotation(box, rng, sigma_scale=1.0 / 6.0, max_tries=100):
  """Draws a weak label inside a box.

  The offset from the box center is Gaussian in the box frame with per-axis
  standard deviation sigma_scale * dim and is redrawn until it falls inside
  the box. After max_tries failures the center is used.

  Args:
    box: A Box3D.
    rng: A numpy Generator.
    sigma_scale: Standard deviation as a fraction of each dimension.
    max_tries: Rejection sampling cap.

  Returns:
    A PointAnnotation with the box's category.
  """
  w, l, h = box.dims
  half = np.array([l, w, h]) / 2.0
  sigma = sigma_scale * np.array([l, w, h])
  local = np.zeros(3)
  for _ in range(max_tries):
    cand = rng.normal(0.0, 1.0, 3) * sigma
    if np.all(np.abs(cand) <= half):
      local = cand
      break
  position = yaw_rotation(box.yaw) @ local + box.center
  return PointAnnotation(position=position, category=box.category)


def _place_boxes(config, rng):
  boxes = []
  for _ in range(config.num_objects):
    for _ in range(100):
      r = rng.uniform(config.min_range, config.max_range)
      theta = rng.uniform(-math.pi, math.pi)
      xy = np.array([r * math.cos(theta), r * math.sin(theta)])
      if all(np.linalg.norm(xy - b.center[:2]) >= config.min_separation
             for b in boxes):
        break
    else:
      continue
    category = int(rng.integers(config.num_categories))
    dims = _CATEGORY_DIMS[category] * rng.uniform(1.0 - config.dim_jitter,
                                                  1.0 + config.dim_jitter, 3)
    yaw = rng.uniform(-math.pi, math.pi)
    center = np.array([xy[0], xy[1], config.ground_z + dims[2] / 2.0])
    boxes.append(Box3D(center=center, dims=dims, yaw=yaw, category=category))
  return boxes


def sample_surface_points(box, count, rng):
  """Samples count points uniformly over the surface of a box."""
  if count <= 0:
    return np.zeros((0, 3))
  w, l, h = box.dims
  half = np.array([l, w, h]) / 2.0
  # Faces normal to local x, y and z.
  areas = np.array([w * h, l * h, l * w])
  axis = rng.choice(3, size=count, p=areas / areas.sum())
  local = rng.uniform(-1.0, 1.0, (count, 3)) * half
  side = np.where(rng.integers(2, size=count) == 1, 1.0, -1.0)
  local[np.arange(count), axis] = side * half[axis]
  return local @ yaw_rotation(box.yaw).T + box.center


def expected_point_count(box, base_density):
  """Expected LiDAR returns on a box: base_density / range^2, clamped at 0."""
  r = max(box.ego_distance(), 1e-3)
  return max(base_density / r**2, 0.0)


def render_rasters(boxes, calibs, config):
  """Paints category-coded footprints of boxes into every view.

  Returns:
    A float32 ndarray of shape [views, num_categories + 1, H, W]. Channel c
    holds 1 where a box of category c is the nearest visible box; the last
    channel holds that box's depth divided by max_range.
  """
  C = config.num_channels
  images = np.zeros((len(calibs), C, config.image_height, config.image_width),
                    dtype=np.float32)
  for j, calib in enumerate(calibs):
    drawn = []
    for box in boxes:
      uv, depth = project_points(box_corners(box), calib)
      if np.any(depth <= 0.1):
        continue
      _, center_depth = project_points(box.center[None], calib)
      drawn.append((center_depth[0], box, uv))
    # Far to near so near boxes overwrite.
    drawn.sort(key=lambda d: -d[0])
    for depth, box, uv in drawn:
      c0 = int(math.floor(max(uv[:, 0].min(), 0.0)))
      c1 = int(math.ceil(min(uv[:, 0].max(), calib.width)))
      r0 = int(math.floor(max(uv[:, 1].min(), 0.0)))
      r1 = int(math.ceil(min(uv[:, 1].max(), calib.height)))
      if c1 <= c0 or r1 <= r0:
        continue
      images[j, :, r0:r1, c0:c1] = 0.0
      images[j, box.category, r0:r1, c0:c1] = 1.0
      images[j, -1, r0:r1, c0:c1] = min(depth / config.max_range, 1.0)
  return images


def generate_scene(config, seed, scene_id=None):
  """Generates one labeled scene.

  Args:
    config: A SceneConfig.
    seed: Integer seed; fixes every random draw.
    scene_id: Optional identifier, defaults to 'scene_<seed>'.

  Returns:
    A Scene.
  """
  rng = np.random.default_rng(seed)
  calibs = make_camera_rig(config)
  boxes = _place_boxes(config, rng)

  chunks = []
  for box in boxes:
    n = rng.poisson(expected_point_count(box, config.base_density))
    chunks.append(sample_surface_points(box, n, rng))
  if config.num_background_points > 0:
    n = config.num_background_points
    r = config.max_range * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(-math.pi, math.pi, n)
    # Ground returns stay just below box bottoms.
    z = config.ground_z - rng.uniform(0.02, 0.1, n)
    chunks.append(np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1))
  points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))

  annotations = [sample_point_annotation(b, rng) for b in boxes]
  images = render_rasters(boxes, calibs, config)
  if scene_id is None:
    scene_id = 'scene_{}'.format(seed)
  return Scene(scene_id=scene_id, points=points, images=images, calibs=calibs,
               annotations=annotations, boxes=boxes)


def generate_split(config, master_seed, split, count):
  """Generates count scenes of one seed stream, ordered by index."""
  return [
      generate_scene(config, scene_seed(master_seed, split, i),
                     scene_id='{}_{:05d}'.format(split, i))
      for i in range(count)
  ]


class HiddenBoxStore:
  """Boxes of the weak split, reachable only from evaluation code."""

  def __init__(self):
    self._boxes: Dict[str, List[Box3D]] = {}

  def __len__(self):
    return len(self._boxes)

  def __contains__(self, scene_id):
    return scene_id in self._boxes

  def add(self, scene_id, boxes):
    if scene_id in self._boxes:
      raise KeyError('duplicate scene id in hidden store: {}'.format(scene_id))
    self._boxes[scene_id] = list(boxes)

  def boxes(self, scene_id):
    return self._boxes[scene_id]

  def scene_ids(self):
    return list(self._boxes)

  def as_dict(self):
    return {
        sid: [b.to_record() for b in boxes]
        for sid, boxes in self._boxes.items()
    }

  @classmethod
  def from_dict(cls, d):
    store = cls()
    for sid in sorted(d):
      store.add(sid, [Box3D.from_record(r) for r in d[sid]])
    return store


def split_dataset(scenes, ratio, hidden_store=None):
  """Splits scenes sequentially into labeled and weak parts.

  Args:
    scenes: A list of Scene ordered by generation index.
    ratio: Labeled fraction in (0, 1].
    hidden_store: Optional HiddenBoxStore receiving the weak scenes' boxes.

  Returns:
    labeled: The first ceil(ratio * N) scenes.
    weak: WeakScene views of the rest.

  Raises:
    ValueError: If ratio is outside (0, 1].
  """
  if not 0.0 < ratio <= 1.0:
    raise ValueError('split ratio must be in (0, 1], got {}'.format(ratio))
  num_labeled = int(math.ceil(ratio * len(scenes) - 1e-9))
  labeled = list(scenes[:num_labeled])
  weak = []
  for scene in scenes[num_labeled:]:
    weak.append(scene.strip_boxes())
    if hidden_store is not None:
      hidden_store.add(scene.scene_id, scene.boxes)
  logger.info('split %d scenes at ratio %.3f: %d labeled, %d weak', len(scenes),
              ratio, len(labeled), len(weak))
  return labeled, weak
