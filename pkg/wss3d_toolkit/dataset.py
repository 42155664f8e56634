# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""On-disk synthetic dataset: scene files, split manifest and hidden boxes.

Layout under a dataset root:
  manifest.json          split assignment of every scene file
  scenes/<id>.json|.bin  scene documents and image blobs
  eval_gt/weak_boxes.json  boxes of the weak split (evaluation only)
"""

import os

from .inout import load_json, load_scene, save_json, save_scene
from .scene_sim import HiddenBoxStore

SPLITS = ('labeled', 'weak', 'val', 'test')

_MANIFEST = 'manifest.json'
_SCENE_DIR = 'scenes'
_HIDDEN_DIR = 'eval_gt'
_HIDDEN_FILE = 'weak_boxes.json'


def manifest_path(root):
  return os.path.join(root, _MANIFEST)


def hidden_store_path(root):
  return os.path.join(root, _HIDDEN_DIR, _HIDDEN_FILE)


def write_dataset(root, splits, hidden_store, meta=None):
  """Persists scenes and writes the manifest.

  Args:
    root: Dataset root directory.
    splits: A dict from split name to a list of Scene/WeakScene.
    hidden_store: The HiddenBoxStore of the weak split.
    meta: Optional dict stored verbatim in the manifest.

  Returns:
    Path to the manifest.
  """
  os.makedirs(os.path.join(root, _SCENE_DIR), exist_ok=True)
  os.makedirs(os.path.join(root, _HIDDEN_DIR), exist_ok=True)

  entries = []
  for split in SPLITS:
    for scene in splits.get(split, []):
      rel = os.path.join(_SCENE_DIR, '{}.json'.format(scene.scene_id))
      save_scene(os.path.join(root, rel), scene)
      entries.append({'path': rel, 'split': split, 'scene_id': scene.scene_id})

  save_json(hidden_store_path(root), hidden_store.as_dict())
  manifest = {'scenes': entries, 'meta': meta or {}}
  save_json(manifest_path(root), manifest)
  return manifest_path(root)


def load_hidden_boxes(root):
  """Loads the weak split's boxes. Only evaluation code calls this."""
  path = hidden_store_path(root)
  if not os.path.isfile(path):
    raise FileNotFoundError('hidden box store not found: {}'.format(path))
  return HiddenBoxStore.from_dict(load_json(path))


class SceneDataset():
  """Scenes of one split, loaded lazily from a dataset root."""

  def __init__(self, root, split):
    """Constructor.

    Args:
      root: Dataset root directory.
      split: One of 'labeled', 'weak', 'val' and 'test'.
    """
    if split not in SPLITS:
      raise KeyError('Unknown split: {}'.format(split))
    self._root = os.path.abspath(root)
    self._split = split

    path = manifest_path(self._root)
    if not os.path.isfile(path):
      raise FileNotFoundError('dataset manifest not found: {}'.format(path))
    manifest = load_json(path)
    self._meta = manifest.get('meta', {})

    hidden_dir = os.path.join(self._root, _HIDDEN_DIR) + os.sep
    self._entries = []
    for e in manifest['scenes']:
      if e['split'] != split:
        continue
      p = os.path.abspath(os.path.join(self._root, e['path']))
      assert not p.startswith(hidden_dir), \
          'training loader refuses hidden path: {}'.format(p)
      self._entries.append((e['scene_id'], p))

  def __len__(self):
    return len(self._entries)

  def __getitem__(self, idx):
    _, path = self._entries[idx]
    # The weak split is never returned with boxes.
    return load_scene(path, with_boxes=self._split != 'weak')

  def __iter__(self):
    for i in range(len(self)):
      yield self[i]

  @property
  def split(self):
    return self._split

  @property
  def meta(self):
    return self._meta

  @property
  def scene_ids(self):
    return [sid for sid, _ in self._entries]
