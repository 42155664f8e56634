# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""The three training stages plus data generation and evaluation.

Every stage reads its inputs from, and writes its outputs to, the run
directory config.output_dir, so each one can run in a fresh process:

  data/                      dataset root (see dataset.py)
  teacher/teacher.ckpt(.json), train_log.jsonl, nds_eval_val_teacher.json
  pseudo/pseudo_labels.jsonl, nds_eval_weak_pseudo_labels.json
  student/student.ckpt(.json), train_log.jsonl, nds_eval_test_student.json
  plots/
  manifest.json
"""

import datetime
import os
from dataclasses import asdict, dataclass, field
from typing import Dict

import numpy as np
import torch
from tqdm import tqdm

from . import __version__
from .checkpoint import restore, save_checkpoint
from .config import config_hash, save_config
from .dataset import manifest_path as dataset_manifest_path
from .dataset import write_dataset
from .factory import get_dataset
from .inout import append_jsonl, load_json, save_json, save_jsonl
from .logging import get_logger
from .metrics import MetricsReport
from .nds_eval import DetectionEvaluator
from .plots import emit_plots
from .scene_sim import (HiddenBoxStore, generate_split, sample_point_annotation,
                        split_dataset)
from .student import (StudentModel, TrainSample, build_student, predict_points,
                      student_train_step)
from .teacher import (PseudoLabelSet, TeacherModel, build_teacher,
                      generate_pseudo_labels, predict_scene, teacher_train_step)

# Seed streams of the training stages; 0-2 are taken by the scene splits.
_TEACHER_STREAM = 10
_STUDENT_STREAM = 11


class MissingArtifactError(FileNotFoundError):
  """Raised when an upstream artifact is absent or inconsistent."""


def run_paths(config):
  """Returns the artifact paths of a run directory."""
  root = os.path.abspath(config.output_dir)
  return {
      'root': root,
      'data': os.path.join(root, 'data'),
      'teacher_dir': os.path.join(root, 'teacher'),
      'teacher_ckpt': os.path.join(root, 'teacher', 'teacher.ckpt'),
      'pseudo_dir': os.path.join(root, 'pseudo'),
      'pseudo': os.path.join(root, 'pseudo', 'pseudo_labels.jsonl'),
      'student_dir': os.path.join(root, 'student'),
      'student_ckpt': os.path.join(root, 'student', 'student.ckpt'),
      'eval_dir': os.path.join(root, 'eval'),
      'plots': os.path.join(root, 'plots'),
      'manifest': os.path.join(root, 'manifest.json'),
  }


def _now():
  return datetime.datetime.now().isoformat(timespec='seconds')


@dataclass
class RunManifest:
  """Bookkeeping of a run: config hash, stage times and artifact paths.

  Several configs may share one run directory, e.g. a student trained with and
  without the consistency loss on the same data. `stages` holds the latest
  record of every stage and `runs` holds the records of each config hash, so
  a variant never erases the stages recorded before it.
  """
  config_hash: str
  code_version: str = __version__
  stages: Dict[str, dict] = field(default_factory=dict)
  artifacts: Dict[str, str] = field(default_factory=dict)
  runs: Dict[str, Dict[str, dict]] = field(default_factory=dict)

  @classmethod
  def open(cls, path, config):
    """Loads the manifest of a run and points it at the hash of config."""
    h = config_hash(config)
    if not os.path.isfile(path):
      return cls(config_hash=h)
    d = load_json(path)
    return cls(config_hash=h,
               code_version=d.get('code_version', __version__),
               stages=d.get('stages', {}),
               artifacts=d.get('artifacts', {}),
               runs=d.get('runs', {}))

  def record(self, stage, started, artifacts):
    for name, p in artifacts.items():
      assert os.path.exists(p), 'stage {} did not write {}'.format(stage, p)
    entry = {
        'started': started,
        'finished': _now(),
        'config_hash': self.config_hash,
    }
    self.stages[stage] = entry
    self.runs.setdefault(self.config_hash, {})[stage] = entry
    self.artifacts.update(artifacts)

  def save(self, path):
    save_json(path, asdict(self))


def _record(config, stage, started, artifacts):
  paths = run_paths(config)
  manifest = RunManifest.open(paths['manifest'], config)
  manifest.record(stage, started, artifacts)
  manifest.save(paths['manifest'])
  return manifest


def _stream_rng(config, stream):
  seq = np.random.SeedSequence([int(config.dataset.seed), stream])
  torch.manual_seed(int(seq.generate_state(1)[0]))
  return np.random.default_rng(seq)


def _require_dataset(config):
  data = run_paths(config)['data']
  if not os.path.isfile(dataset_manifest_path(data)):
    raise MissingArtifactError(
        'dataset not found under {}; run gen-data first'.format(data))
  return data


def _dataset_meta(data):
  return load_json(dataset_manifest_path(data))['meta']


def _evaluator(config, data, split, num_categories):
  ev = config.eval
  return DetectionEvaluator(data, split, num_categories=num_categories,
                            thresholds=ev.thresholds,
                            tp_threshold=ev.tp_threshold, bins=ev.range_bins)


def stage_generate_data(config):
  """Generates the train pool, splits it and writes train/val/test scenes.

  Returns:
    The dataset root.
  """
  started = _now()
  paths = run_paths(config)
  os.makedirs(paths['root'], exist_ok=True)
  logger = get_logger(os.path.join(paths['root'], 'gen_data.log'))
  save_config(os.path.join(paths['root'], 'config.json'), config)

  ds = config.dataset
  sc = ds.scene
  logger.info('Generating {} train, {} val and {} test scenes'.format(
      ds.num_train_scenes, ds.num_val_scenes, ds.num_test_scenes))
  train = generate_split(sc, ds.seed, 'train', ds.num_train_scenes)
  store = HiddenBoxStore()
  labeled, weak = split_dataset(train, ds.split_ratio, store)
  val = generate_split(sc, ds.seed, 'val', ds.num_val_scenes)
  test = generate_split(sc, ds.seed, 'test', ds.num_test_scenes)

  meta = {
      'config_hash': config_hash(config),
      'split_ratio': ds.split_ratio,
      'num_categories': sc.num_categories,
      'image_channels': sc.num_channels,
      'scene': sc.as_dict(),
  }
  write_dataset(paths['data'], {
      'labeled': labeled,
      'weak': weak,
      'val': val,
      'test': test,
  }, store, meta)
  logger.info('Wrote dataset to {}'.format(paths['data']))
  _record(config, 'gen-data', started,
          {'dataset': dataset_manifest_path(paths['data'])})
  return paths['data']


def evaluate_teacher(model, config, split, out_dir=None, res_name='teacher'):
  """Scores teacher boxes for the annotations of a labeled split."""
  data = _require_dataset(config)
  meta = _dataset_meta(data)
  evaluator = _evaluator(config, data, split, meta['num_categories'])
  preds = {s.scene_id: predict_scene(model, s) for s in get_dataset(data, split)}
  return evaluator.evaluate_predictions(preds, out_dir, res_name)


def stage_train_teacher(config):
  """Trains the point-to-box teacher on the labeled split.

  Annotations are resampled from the boxes at the start of every epoch.

  Returns:
    ckpt: Path to the teacher checkpoint.
    report: The validation MetricsReport.

  Raises:
    MissingArtifactError: If the dataset is missing or its labeled split is
      empty.
  """
  started = _now()
  paths = run_paths(config)
  data = _require_dataset(config)
  os.makedirs(paths['teacher_dir'], exist_ok=True)
  logger = get_logger(os.path.join(paths['teacher_dir'], 'train_teacher.log'))

  labeled = list(get_dataset(data, 'labeled'))
  if not labeled:
    raise MissingArtifactError('labeled split of {} is empty'.format(data))
  meta = _dataset_meta(data)
  tc = config.teacher
  logger.info('Training teacher on {} labeled scenes for {} steps'.format(
      len(labeled), tc.steps))

  rng = _stream_rng(config, _TEACHER_STREAM)
  model = TeacherModel(
      **tc.model_kwargs(meta['num_categories'], meta['image_channels']))
  optimizer = torch.optim.AdamW(model.parameters(), lr=tc.lr,
                                weight_decay=tc.weight_decay)

  log_file = os.path.join(paths['teacher_dir'], 'train_log.jsonl')
  save_jsonl(log_file, [])
  order = []
  for step in tqdm(range(tc.steps), desc='teacher', disable=not config.verbose):
    if not order:
      order = rng.permutation(len(labeled)).tolist()
      for scene in labeled:
        scene.annotations = [sample_point_annotation(b, rng) for b in scene.boxes]
    batch = [labeled[i] for i in order[:tc.batch_size]]
    order = order[tc.batch_size:]
    terms = teacher_train_step(model, optimizer, batch, tc.lambda_box,
                               tc.lambda_cls)
    append_jsonl(log_file, dict(step=step, lr=tc.lr, **terms))

  save_checkpoint(paths['teacher_ckpt'], model,
                  meta={'kind': 'teacher', 'config_hash': config_hash(config)})
  logger.info('Saved teacher to {}'.format(paths['teacher_ckpt']))

  report = evaluate_teacher(model, config, 'val', paths['teacher_dir'])
  report_file = os.path.join(paths['teacher_dir'], 'nds_eval_val_teacher.json')
  _record(config, 'train-teacher', started, {
      'teacher_ckpt': paths['teacher_ckpt'],
      'teacher_log': log_file,
      'teacher_report': report_file,
  })
  return paths['teacher_ckpt'], report


def stage_generate_pseudo(config, checkpoint=None):
  """Labels every weak scene with the teacher.

  The pseudo labels are also scored against the hidden weak boxes, which
  only the evaluator reads.

  Returns:
    Path to the pseudo-label JSONL file.

  Raises:
    MissingArtifactError: If the checkpoint or dataset is missing.
  """
  started = _now()
  paths = run_paths(config)
  data = _require_dataset(config)
  ckpt = checkpoint or paths['teacher_ckpt']
  if not os.path.isfile(ckpt):
    raise MissingArtifactError('teacher checkpoint not found: {}'.format(ckpt))
  os.makedirs(paths['pseudo_dir'], exist_ok=True)
  logger = get_logger(os.path.join(paths['pseudo_dir'], 'gen_pseudo.log'))

  model, _ = restore(ckpt, build_teacher)
  weak = get_dataset(data, 'weak')
  if len(weak) == 0:
    logger.warning('weak split is empty; writing an empty pseudo-label file')
  labels = generate_pseudo_labels(model, weak)
  labels.save(paths['pseudo'])
  logger.info('Wrote {} pseudo-label records to {}'.format(
      len(labels), paths['pseudo']))

  meta = _dataset_meta(data)
  _evaluator(config, data, 'weak', meta['num_categories']).evaluate(
      paths['pseudo'], paths['pseudo_dir'])
  _record(config, 'gen-pseudo', started, {
      'pseudo': paths['pseudo'],
      'pseudo_report': os.path.join(paths['pseudo_dir'],
                                    'nds_eval_weak_pseudo_labels.json'),
  })
  return paths['pseudo']


def _load_pseudo_samples(config, data, pseudo_path):
  if not os.path.isfile(pseudo_path):
    raise MissingArtifactError(
        'pseudo-label file not found: {}'.format(pseudo_path))
  labels = PseudoLabelSet.load(pseudo_path)
  weak = list(get_dataset(data, 'weak'))
  if labels.scene_ids() != [s.scene_id for s in weak]:
    raise MissingArtifactError(
        'pseudo labels in {} do not cover the weak split'.format(pseudo_path))
  samples = []
  for scene in weak:
    boxes = labels.boxes(scene.scene_id)
    if len(boxes) != len(scene.annotations):
      raise MissingArtifactError(
          'scene {} has {} pseudo boxes for {} annotations'.format(
              scene.scene_id, len(boxes), len(scene.annotations)))
    samples.append(TrainSample(points=scene.points, boxes=boxes,
                               annotations=scene.annotations))
  return samples


def evaluate_student(model, config, split, out_dir=None, res_name='student'):
  """Runs the student on a split, writes predictions and scores them."""
  data = _require_dataset(config)
  meta = _dataset_meta(data)
  sc = config.student
  preds = {}
  for scene in get_dataset(data, split):
    preds[scene.scene_id] = predict_points(model, scene.points,
                                           sc.score_threshold,
                                           sc.max_detections)
  if out_dir is not None:
    os.makedirs(out_dir, exist_ok=True)
    save_jsonl(os.path.join(out_dir, 'predictions_{}.jsonl'.format(split)), [{
        'scene_id': sid,
        'boxes': [b.to_record(with_score=True) for b in boxes],
    } for sid, boxes in preds.items()])
  evaluator = _evaluator(config, data, split, meta['num_categories'])
  return evaluator.evaluate_predictions(preds, out_dir, res_name)


def stage_train_student(config, pseudo_path=None):
  """Trains the student on labeled plus pseudo-labeled scenes.

  In 'baseline' mode, or when the weak split is empty, only labeled scenes
  are used.

  Returns:
    ckpt: Path to the student checkpoint.
    report: The test MetricsReport with range bins.

  Raises:
    MissingArtifactError: If the dataset or pseudo labels are missing, or the
      pseudo labels do not match the weak split.
  """
  started = _now()
  paths = run_paths(config)
  data = _require_dataset(config)
  os.makedirs(paths['student_dir'], exist_ok=True)
  logger = get_logger(os.path.join(paths['student_dir'], 'train_student.log'))
  sc = config.student
  meta = _dataset_meta(data)

  labeled = [
      TrainSample(points=s.points, boxes=s.boxes, annotations=s.annotations)
      for s in get_dataset(data, 'labeled')
  ]
  pseudo = []
  if sc.mode == 'wssl' and len(get_dataset(data, 'weak')) > 0:
    pseudo = _load_pseudo_samples(config, data, pseudo_path or paths['pseudo'])
  pool = labeled + pseudo
  if not pool:
    raise MissingArtifactError('no training scenes under {}'.format(data))
  logger.info('Training student ({}) on {} labeled and {} pseudo scenes'.format(
      sc.mode, len(labeled), len(pseudo)))

  rng = _stream_rng(config, _STUDENT_STREAM)
  model = StudentModel(**sc.model_kwargs(meta['num_categories']))
  optimizer = torch.optim.AdamW(model.parameters(), lr=sc.lr,
                                weight_decay=sc.weight_decay)

  log_file = os.path.join(paths['student_dir'], 'train_log.jsonl')
  save_jsonl(log_file, [])
  batch_size = min(sc.batch_size, len(pool))
  for step in tqdm(range(sc.steps), desc='student', disable=not config.verbose):
    idx = np.sort(rng.choice(len(pool), size=batch_size, replace=False))
    lab = [pool[i] for i in idx if i < len(labeled)]
    ps = [pool[i] for i in idx if i >= len(labeled)]
    terms = student_train_step(model, optimizer, lab, ps, rng,
                               ssl_weight=sc.ssl_weight, ssl_mode=sc.ssl_mode,
                               mask_sigma=sc.mask_sigma,
                               dropout=sc.point_dropout)
    append_jsonl(log_file, dict(step=step, lr=sc.lr, **terms))

  save_checkpoint(paths['student_ckpt'], model,
                  meta={'kind': 'student', 'config_hash': config_hash(config)})
  logger.info('Saved student to {}'.format(paths['student_ckpt']))

  report = evaluate_student(model, config, 'test', paths['student_dir'])
  _record(config, 'train-student', started, {
      'student_ckpt': paths['student_ckpt'],
      'student_log': log_file,
      'student_report': os.path.join(paths['student_dir'],
                                     'nds_eval_test_student.json'),
  })
  return paths['student_ckpt'], report


def stage_evaluate(config, checkpoint=None, predictions=None, split='test'):
  """Re-evaluates a persisted student checkpoint or a prediction file.

  Returns:
    A MetricsReport.

  Raises:
    MissingArtifactError: If the checkpoint or prediction file is missing.
  """
  started = _now()
  paths = run_paths(config)
  data = _require_dataset(config)
  os.makedirs(paths['eval_dir'], exist_ok=True)
  get_logger(os.path.join(paths['eval_dir'], 'evaluate.log'))

  if predictions is not None:
    if not os.path.isfile(predictions):
      raise MissingArtifactError(
          'prediction file not found: {}'.format(predictions))
    meta = _dataset_meta(data)
    report = _evaluator(config, data, split, meta['num_categories']).evaluate(
        predictions, paths['eval_dir'])
    res_name = os.path.splitext(os.path.basename(predictions))[0]
  else:
    ckpt = checkpoint or paths['student_ckpt']
    if not os.path.isfile(ckpt):
      raise MissingArtifactError('student checkpoint not found: {}'.format(ckpt))
    model, _ = restore(ckpt, build_student)
    report = evaluate_student(model, config, split, paths['eval_dir'])
    res_name = 'student'
  report_file = os.path.join(paths['eval_dir'],
                             'nds_eval_{}_{}.json'.format(split, res_name))
  _record(config, 'evaluate', started, {'eval_report': report_file})
  return report


def load_report(path):
  """Reads a MetricsReport JSON.

  Raises:
    MissingArtifactError: If the file is missing.
  """
  if not os.path.isfile(path):
    raise MissingArtifactError('report not found: {}'.format(path))
  return MetricsReport.from_json(load_json(path))


def stage_plot(config, reports=None):
  """Plots range-binned reports.

  Args:
    config: An ExperimentConfig.
    reports: A dict of run name to report path; defaults to this run's
      student test report.

  Returns:
    A dict of chart name to image path.
  """
  started = _now()
  paths = run_paths(config)
  if not reports:
    reports = {
        'student': os.path.join(paths['student_dir'],
                                'nds_eval_test_student.json')
    }
  loaded = {name: load_report(p) for name, p in reports.items()}
  os.makedirs(paths['plots'], exist_ok=True)
  get_logger(os.path.join(paths['plots'], 'plot.log'))
  images = emit_plots(loaded, paths['plots'])
  _record(config, 'plot', started,
          {'plot_' + k: v for k, v in sorted(images.items())})
  return images


def run_pipeline(config, with_teacher=True):
  """Runs gen-data, the teacher stages when needed, and the student.

  Returns:
    A dict with the 'student' test report and, when trained, the 'teacher'
    validation report.
  """
  stage_generate_data(config)
  out = {}
  weak = get_dataset(run_paths(config)['data'], 'weak')
  if with_teacher and config.student.mode == 'wssl' and len(weak) > 0:
    _, out['teacher'] = stage_train_teacher(config)
    stage_generate_pseudo(config)
  _, out['student'] = stage_train_student(config)
  return out
