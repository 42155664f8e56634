# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Checkpoints: one raw little-endian blob plus a JSON manifest."""

import os

import numpy as np
import torch

from .inout import load_json, save_json

_DTYPES = {
    torch.float32: '<f4',
    torch.float64: '<f8',
    torch.int64: '<i8',
    torch.bool: '|b1',
}


def manifest_path(path):
  return path + '.json'


def save_checkpoint(path, model, meta=None):
  """Writes a model's state dict.

  Tensors are written back to back in sorted name order to path; the manifest
  at path + '.json' lists name, shape, dtype and byte offset of each, plus
  the model_config needed to rebuild the network.

  Args:
    path: Blob path.
    model: A Module with a model_config attribute.
    meta: Extra JSON-serializable fields stored in the manifest.
  """
  state = model.state_dict()
  tensors = []
  offset = 0
  with open(path, 'wb') as f:
    for name in sorted(state):
      t = state[name].detach().cpu()
      if t.dtype not in _DTYPES:
        raise ValueError('unsupported dtype {} for {}'.format(t.dtype, name))
      dtype = _DTYPES[t.dtype]
      data = np.ascontiguousarray(t.numpy(), dtype=np.dtype(dtype)).tobytes()
      f.write(data)
      tensors.append({
          'name': name,
          'shape': list(t.shape),
          'dtype': dtype,
          'offset': offset,
          'nbytes': len(data),
      })
      offset += len(data)
  save_json(manifest_path(path), {
      'blob': os.path.basename(path),
      'model_config': getattr(model, 'model_config', {}),
      'meta': meta or {},
      'tensors': tensors,
  })


def load_checkpoint(path):
  """Reads a checkpoint written by save_checkpoint.

  Returns:
    state: A dict of name to tensor.
    manifest: The manifest dict.

  Raises:
    FileNotFoundError: If the blob or the manifest is missing.
  """
  if not os.path.isfile(path) or not os.path.isfile(manifest_path(path)):
    raise FileNotFoundError('checkpoint not found: {}'.format(path))
  manifest = load_json(manifest_path(path))
  with open(path, 'rb') as f:
    blob = f.read()
  state = {}
  for t in manifest['tensors']:
    arr = np.frombuffer(blob, dtype=np.dtype(t['dtype']), offset=t['offset'],
                        count=int(np.prod(t['shape'], dtype=np.int64)))
    state[t['name']] = torch.from_numpy(arr.reshape(t['shape']).copy())
  return state, manifest


def restore(path, builder):
  """Rebuilds a model with builder(model_config) and loads its weights."""
  state, manifest = load_checkpoint(path)
  model = builder(manifest['model_config'])
  model.load_state_dict(state)
  model.eval()
  return model, manifest
