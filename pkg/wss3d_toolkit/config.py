# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Experiment configuration: dataclass tree, file loading and overrides."""

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import List

import yaml

from .geometry import BEVSpec
from .inout import save_json
from .metrics import validate_bins
from .scene_sim import SceneConfig
from .student import SSL_MODES
from .teacher import QUERY_INITS

STUDENT_MODES = ('wssl', 'baseline')


class ConfigError(ValueError):
  """Raised on any invalid config value or override."""


def _default_bev():
  return {'x_range': [-50.0, 50.0], 'y_range': [-50.0, 50.0], 'resolution': 1.0}


def _check(cond, msg, *args):
  if not cond:
    raise ConfigError(msg.format(*args))


def _check_bev(bev, name, square=False):
  try:
    spec = BEVSpec(**bev)
  except (TypeError, ValueError) as e:
    raise ConfigError('{}.bev: {}'.format(name, e))
  if square:
    _check(spec.H == spec.W, '{}.bev must be square, got {}x{}', name, spec.H,
           spec.W)


@dataclass
class DatasetConfig:
  seed: int = 0
  num_train_scenes: int = 200
  num_val_scenes: int = 40
  num_test_scenes: int = 40
  split_ratio: float = 0.1
  scene: SceneConfig = field(default_factory=SceneConfig)

  def __post_init__(self):
    _check(0.0 < self.split_ratio <= 1.0,
           'dataset.split_ratio must be in (0, 1], got {}', self.split_ratio)
    _check(self.num_train_scenes > 0, 'dataset.num_train_scenes must be > 0')
    _check(self.num_val_scenes >= 0 and self.num_test_scenes >= 0,
           'dataset scene counts must be >= 0')


@dataclass
class TeacherConfig:
  embed_dim: int = 32
  heads: int = 4
  levels: int = 2
  grid_side: int = 4
  num_layers: int = 1
  query_init: str = 'explicit'
  use_images: bool = True
  max_queries: int = 64
  image_footprint: float = 2.0
  z_range: List[float] = field(default_factory=lambda: [-5.0, 3.0])
  bev: dict = field(default_factory=_default_bev)
  lr: float = 0.002
  weight_decay: float = 0.0001
  steps: int = 300
  batch_size: int = 4
  lambda_box: float = 1.0
  lambda_cls: float = 1.0

  def __post_init__(self):
    _check(self.steps > 0, 'teacher.steps must be > 0, got {}', self.steps)
    _check(self.batch_size > 0, 'teacher.batch_size must be > 0')
    _check(self.lr > 0, 'teacher.lr must be > 0')
    _check(self.query_init in QUERY_INITS, 'teacher.query_init must be one of {}',
           QUERY_INITS)
    _check(self.embed_dim % self.heads == 0,
           'teacher.embed_dim must be divisible by teacher.heads')
    _check(self.levels >= 1 and self.grid_side >= 1 and self.num_layers >= 1,
           'teacher.levels, grid_side and num_layers must be >= 1')
    _check_bev(self.bev, 'teacher')

  def model_kwargs(self, num_classes, image_channels):
    return {
        'num_classes': num_classes,
        'image_channels': image_channels,
        'bev': dict(self.bev),
        'embed_dim': self.embed_dim,
        'heads': self.heads,
        'levels': self.levels,
        'grid_side': self.grid_side,
        'num_layers': self.num_layers,
        'query_init': self.query_init,
        'use_images': self.use_images,
        'max_queries': self.max_queries,
        'image_footprint': self.image_footprint,
        'z_range': list(self.z_range),
    }


@dataclass
class StudentConfig:
  mode: str = 'wssl'
  bev: dict = field(default_factory=_default_bev)
  channels: int = 32
  trunk_layers: int = 2
  head_channels: int = 32
  lr: float = 0.002
  weight_decay: float = 0.0001
  steps: int = 300
  batch_size: int = 4
  ssl_weight: float = 1.0
  ssl_mode: str = 'masked'
  mask_sigma: float = 2.0
  point_dropout: float = 0.2
  score_threshold: float = 0.1
  max_detections: int = 100

  def __post_init__(self):
    _check(self.steps > 0, 'student.steps must be > 0, got {}', self.steps)
    _check(self.batch_size > 0, 'student.batch_size must be > 0')
    _check(self.lr > 0, 'student.lr must be > 0')
    _check(self.mode in STUDENT_MODES, 'student.mode must be one of {}',
           STUDENT_MODES)
    _check(self.ssl_mode in SSL_MODES, 'student.ssl_mode must be one of {}',
           SSL_MODES)
    _check(self.ssl_weight >= 0, 'student.ssl_weight must be >= 0')
    _check(self.mask_sigma > 0, 'student.mask_sigma must be > 0')
    _check(0.0 <= self.point_dropout < 1.0,
           'student.point_dropout must be in [0, 1)')
    _check_bev(self.bev, 'student', square=True)

  def model_kwargs(self, num_classes):
    return {
        'num_classes': num_classes,
        'bev': dict(self.bev),
        'channels': self.channels,
        'trunk_layers': self.trunk_layers,
        'head_channels': self.head_channels,
    }


@dataclass
class EvalConfig:
  thresholds: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
  tp_threshold: float = 2.0
  # null upper bound means infinity.
  bins: List[list] = field(
      default_factory=lambda: [[0.0, 20.0], [20.0, 30.0], [30.0, 40.0],
                               [40.0, None]])

  def __post_init__(self):
    _check(all(t > 0 for t in self.thresholds) and self.thresholds,
           'eval.thresholds must be positive')
    try:
      validate_bins(self.range_bins)
    except (TypeError, ValueError) as e:
      raise ConfigError('eval.bins: {}'.format(e))

  @property
  def range_bins(self):
    return [(float(lo), math.inf if hi is None else float(hi))
            for lo, hi in self.bins]


@dataclass
class ExperimentConfig:
  dataset: DatasetConfig = field(default_factory=DatasetConfig)
  teacher: TeacherConfig = field(default_factory=TeacherConfig)
  student: StudentConfig = field(default_factory=StudentConfig)
  eval: EvalConfig = field(default_factory=EvalConfig)
  output_dir: str = 'runs/default'
  verbose: bool = True


def _coerce(value, default, path):
  if isinstance(default, bool):
    _check(isinstance(value, bool), '{} must be a boolean, got {!r}', path, value)
    return value
  if isinstance(default, int):
    _check(isinstance(value, int) and not isinstance(value, bool),
           '{} must be an integer, got {!r}', path, value)
    return value
  if isinstance(default, float):
    try:
      return float(value)
    except (TypeError, ValueError):
      raise ConfigError('{} must be a number, got {!r}'.format(path, value))
  if isinstance(default, str):
    _check(isinstance(value, str), '{} must be a string, got {!r}', path, value)
  return value


def _build(cls, d, path):
  _check(isinstance(d, dict), '{} must be a mapping', path or 'config')
  names = {f.name for f in fields(cls)}
  for k in d:
    _check(k in names, 'unknown config key: {}', '.'.join(filter(None, [path, k])))
  defaults = cls()
  kwargs = {}
  for f in fields(cls):
    if f.name not in d:
      continue
    key = '.'.join(filter(None, [path, f.name]))
    default = getattr(defaults, f.name)
    if is_dataclass(default):
      kwargs[f.name] = _build(type(default), d[f.name], key)
    else:
      kwargs[f.name] = _coerce(d[f.name], default, key)
  try:
    return cls(**kwargs)
  except ConfigError:
    raise
  except (TypeError, ValueError) as e:
    raise ConfigError('{}: {}'.format(path or 'config', e))


def to_dict(config):
  return asdict(config)


def from_dict(d):
  """Builds an ExperimentConfig; missing keys take their defaults.

  Raises:
    ConfigError: On unknown keys or invalid values.
  """
  return _build(ExperimentConfig, d, '')


def apply_override(d, override):
  """Sets one leaf of a raw config dict from 'a.b.c=value'.

  The value is parsed as YAML, so numbers, booleans, null and lists work.

  Raises:
    ConfigError: On malformed overrides or unknown keys.
  """
  if '=' not in override:
    raise ConfigError('override must look like key.path=value, got {!r}'.format(
        override))
  key, raw = override.split('=', 1)
  parts = key.strip().split('.')
  node = d
  for p in parts[:-1]:
    _check(isinstance(node, dict) and p in node, 'unknown config key: {}', key)
    node = node[p]
  _check(isinstance(node, dict) and parts[-1] in node, 'unknown config key: {}',
         key)
  try:
    node[parts[-1]] = yaml.safe_load(raw)
  except yaml.YAMLError as e:
    raise ConfigError('cannot parse override {!r}: {}'.format(override, e))
  return d


def load_config(path=None, seed=None, out=None, overrides=()):
  """Loads a config file and applies command-line overrides.

  A relative output_dir from the file resolves against the file's directory;
  a relative out resolves against the working directory.

  Args:
    path: A JSON or YAML config file, or None for defaults.
    seed: Overrides dataset.seed.
    out: Overrides output_dir.
    overrides: Iterable of 'key.path=value' strings.

  Returns:
    An ExperimentConfig.

  Raises:
    ConfigError: On any invalid input.
  """
  raw = to_dict(ExperimentConfig())
  base = Path.cwd()
  if path is not None:
    cfg_path = Path(path)
    if not cfg_path.is_file():
      raise ConfigError('config file not found: {}'.format(cfg_path))
    try:
      content = yaml.safe_load(cfg_path.read_text()) or {}
    except yaml.YAMLError as e:
      raise ConfigError('cannot parse {}: {}'.format(cfg_path, e))
    _check(isinstance(content, dict), '{} must hold a mapping', cfg_path)
    raw = _merge(raw, content, '')
    base = cfg_path.resolve().parent

  output_dir = Path(raw['output_dir'])
  if not output_dir.is_absolute():
    raw['output_dir'] = str((base / output_dir).resolve())
  for o in overrides or ():
    apply_override(raw, o)
  if seed is not None:
    raw['dataset']['seed'] = int(seed)
  if out is not None:
    raw['output_dir'] = str(Path(out).resolve())
  return from_dict(raw)


def _merge(base, update, path):
  out = copy.deepcopy(base)
  for k, v in update.items():
    key = '.'.join(filter(None, [path, k]))
    _check(k in out, 'unknown config key: {}', key)
    if isinstance(out[k], dict) and isinstance(v, dict) and k != 'bev':
      out[k] = _merge(out[k], v, key)
    else:
      out[k] = v
  return out


def derive(config, output_dir=None, overrides=()):
  """Returns a modified copy of a config, e.g. one cell of a sweep."""
  raw = to_dict(config)
  for o in overrides:
    apply_override(raw, o)
  if output_dir is not None:
    raw['output_dir'] = str(output_dir)
  return from_dict(raw)


def config_hash(config):
  """SHA-256 of the canonical JSON dump, excluding output location."""
  d = to_dict(config)
  d.pop('output_dir', None)
  d.pop('verbose', None)
  blob = json.dumps(d, sort_keys=True, separators=(',', ':'))
  return hashlib.sha256(blob.encode('utf-8')).hexdigest()


def save_config(path, config):
  save_json(path, to_dict(config))
