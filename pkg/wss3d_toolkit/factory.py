# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Factory method for easily getting datasets by name."""

from .dataset import SPLITS, SceneDataset

_sets = {}

for split in SPLITS:
  _sets[split] = (lambda root, split=split: SceneDataset(root, split))


def get_dataset(root, name):
  """Gets a dataset by name.

  Args:
    root: Dataset root directory.
    name: Split name. E.g., 'labeled'.

  Returns:
    A SceneDataset.

  Raises:
    KeyError: If name is not supported.
  """
  if name not in _sets:
    raise KeyError('Unknown dataset name: {}'.format(name))
  return _sets[name](root)
