# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""I/O functions for scenes, reports and line-delimited records."""

import json
import os

import numpy as np

from .structures import Box3D, CameraCalib, PointAnnotation, Scene, WeakScene


def load_json(path):
  """Loads content of a JSON file.

  Args:
    path: Path to the JSON file.

  Returns:
    Content of the loaded JSON file.
  """
  with open(path, 'r') as f:
    return json.load(f)


def save_json(path, content):
  """Saves content to a JSON file with one sorted top-level entry per line.

  Args:
    path: Path to the output JSON file.
    content: Dictionary/list to save.
  """
  with open(path, 'w') as f:

    if isinstance(content, dict):
      f.write('{\n')
      content_sorted = sorted(content.items(), key=lambda x: x[0])
      for elem_id, (k, v) in enumerate(content_sorted):
        f.write('  \"{}\": {}'.format(k, json.dumps(v, sort_keys=True)))
        if elem_id != len(content) - 1:
          f.write(',')
        f.write('\n')
      f.write('}\n')

    elif isinstance(content, list):
      f.write('[\n')
      for elem_id, elem in enumerate(content):
        f.write('  {}'.format(json.dumps(elem, sort_keys=True)))
        if elem_id != len(content) - 1:
          f.write(',')
        f.write('\n')
      f.write(']\n')

    else:
      json.dump(content, f, sort_keys=True)


def load_jsonl(path):
  """Loads a JSON-lines file into a list of records."""
  records = []
  with open(path, 'r') as f:
    for line in f:
      line = line.strip()
      if line:
        records.append(json.loads(line))
  return records


def save_jsonl(path, records):
  """Writes one sorted-key JSON document per line."""
  with open(path, 'w') as f:
    for rec in records:
      f.write(json.dumps(rec, sort_keys=True) + '\n')


def append_jsonl(path, record):
  with open(path, 'a') as f:
    f.write(json.dumps(record, sort_keys=True) + '\n')


def save_scene(path, scene):
  """Writes a scene as JSON plus a sibling little-endian float32 image blob.

  Weak scenes are written without a 'boxes' field.

  Args:
    path: Path to the scene JSON file; the blob goes to <stem>.bin.
    scene: A Scene or WeakScene.
  """
  blob_path = os.path.splitext(path)[0] + '.bin'
  images = np.ascontiguousarray(scene.images, dtype='<f4')
  with open(blob_path, 'wb') as f:
    f.write(images.tobytes())

  content = {
      'scene_id': scene.scene_id,
      'points': scene.points.ravel().tolist(),
      'annotations': [a.to_record() for a in scene.annotations],
      'calibs': [c.as_dict() for c in scene.calibs],
      'images': {
          'file': os.path.basename(blob_path),
          'shape': list(images.shape),
          'dtype': '<f4',
      },
  }
  if isinstance(scene, Scene):
    content['boxes'] = [b.to_record() for b in scene.boxes]
  save_json(path, content)


def load_scene(path, with_boxes=True):
  """Reads a scene written by save_scene.

  Args:
    path: Path to the scene JSON file.
    with_boxes: Return a Scene when the file carries boxes; otherwise a
      WeakScene.

  Returns:
    A Scene or WeakScene.
  """
  content = load_json(path)
  header = content['images']
  blob_path = os.path.join(os.path.dirname(path), header['file'])
  images = np.fromfile(blob_path, dtype=np.dtype(header['dtype'])).reshape(
      header['shape'])
  kwargs = dict(
      scene_id=content['scene_id'],
      points=np.array(content['points'], dtype=np.float64).reshape(-1, 3),
      images=images.astype(np.float32),
      calibs=[CameraCalib.from_dict(c) for c in content['calibs']],
      annotations=[PointAnnotation.from_record(r) for r in content['annotations']],
  )
  if with_boxes and 'boxes' in content:
    return Scene(boxes=[Box3D.from_record(r) for r in content['boxes']], **kwargs)
  return WeakScene(**kwargs)


def boxes_to_records(boxes):
  return [b.to_record(with_score=True) for b in boxes]


def records_to_boxes(records):
  return [Box3D.from_record(r) for r in records]
