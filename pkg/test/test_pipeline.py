import os

import pytest

from wss3d_toolkit.config import config_hash, derive
from wss3d_toolkit.factory import get_dataset
from wss3d_toolkit.inout import load_json, load_jsonl, save_jsonl
from wss3d_toolkit.metrics import MetricsReport
from wss3d_toolkit.pipeline import (MissingArtifactError, run_paths, run_pipeline,
                                    stage_evaluate, stage_generate_data,
                                    stage_plot, stage_train_student)


def _read(path):
    with open(path, 'rb') as f:
        return f.read()


def test_run_pipeline(tiny_config):
    out = run_pipeline(tiny_config)
    paths = run_paths(tiny_config)
    assert set(out) == {'teacher', 'student'}
    assert isinstance(out['student'], MetricsReport)
    assert len(out['student'].bins) == 4

    manifest = load_json(paths['manifest'])
    assert set(manifest['stages']) == {'gen-data', 'train-teacher', 'gen-pseudo',
                                       'train-student'}
    for p in manifest['artifacts'].values():
        assert os.path.exists(p)

    assert len(get_dataset(paths['data'], 'labeled')) == 3
    weak = get_dataset(paths['data'], 'weak')
    records = load_jsonl(paths['pseudo'])
    assert [r['scene_id'] for r in records] == weak.scene_ids
    for rec, scene in zip(records, weak):
        assert len(rec['boxes']) == len(scene.annotations)
        assert [int(b[7]) for b in rec['boxes']] == [a.category
                                                     for a in scene.annotations]

    log = load_jsonl(os.path.join(paths['student_dir'], 'train_log.jsonl'))
    assert [r['step'] for r in log] == [0, 1]
    assert os.path.isfile(os.path.join(paths['pseudo_dir'],
                                       'nds_eval_weak_pseudo_labels.json'))
    assert os.path.isfile(os.path.join(paths['teacher_dir'],
                                       'nds_eval_val_teacher.json'))

    report_file = os.path.join(paths['student_dir'], 'nds_eval_test_student.json')
    again = stage_evaluate(tiny_config)
    assert again.to_json() == load_json(report_file)

    pred_file = os.path.join(paths['student_dir'], 'predictions_test.jsonl')
    from_file = stage_evaluate(tiny_config, predictions=pred_file)
    assert from_file.to_json() == again.to_json()

    images = stage_plot(tiny_config)
    assert all(os.path.isfile(p) for p in images.values())


def test_runs_are_reproducible(tiny_config, tmp_path):
    other = derive(tiny_config, output_dir=str(tmp_path / 'again'))
    run_pipeline(tiny_config)
    run_pipeline(other)
    a, b = run_paths(tiny_config), run_paths(other)
    assert _read(a['pseudo']) == _read(b['pseudo'])
    for rel in ('student/nds_eval_test_student.json',
                'teacher/nds_eval_val_teacher.json',
                'data/manifest.json'):
        assert _read(os.path.join(a['root'], rel)) == _read(
            os.path.join(b['root'], rel))


def test_baseline_skips_teacher(tiny_config):
    config = derive(tiny_config, overrides=['student.mode=baseline'])
    out = run_pipeline(config)
    assert set(out) == {'student'}
    assert not os.path.exists(run_paths(config)['pseudo'])


def test_pseudo_labels_must_cover_weak_split(tiny_config):
    run_pipeline(tiny_config)
    paths = run_paths(tiny_config)
    records = load_jsonl(paths['pseudo'])
    save_jsonl(paths['pseudo'], records[1:])
    with pytest.raises(MissingArtifactError):
        stage_train_student(tiny_config)

    records[0]['boxes'] = records[0]['boxes'][1:]
    save_jsonl(paths['pseudo'], records)
    with pytest.raises(MissingArtifactError):
        stage_train_student(tiny_config)


def test_stages_need_dataset(tiny_config):
    with pytest.raises(MissingArtifactError):
        stage_train_student(tiny_config)
    stage_generate_data(tiny_config)
    with pytest.raises(MissingArtifactError):
        stage_evaluate(tiny_config)
    with pytest.raises(MissingArtifactError):
        stage_plot(tiny_config, {'x': '/no/such/report.json'})


def test_manifest_keeps_stages_of_paired_variants(tiny_config):
    run_pipeline(tiny_config)
    variant = derive(tiny_config, overrides=['student.ssl_weight=0.0'])
    stage_train_student(variant)

    manifest = load_json(run_paths(tiny_config)['manifest'])
    full, paired = config_hash(tiny_config), config_hash(variant)
    assert full != paired
    assert manifest['config_hash'] == paired
    assert set(manifest['runs'][full]) == {'gen-data', 'train-teacher',
                                           'gen-pseudo', 'train-student'}
    assert set(manifest['runs'][paired]) == {'train-student'}
    assert set(manifest['stages']) == {'gen-data', 'train-teacher', 'gen-pseudo',
                                       'train-student'}
    assert manifest['stages']['gen-data']['config_hash'] == full
    assert manifest['stages']['train-student']['config_hash'] == paired
