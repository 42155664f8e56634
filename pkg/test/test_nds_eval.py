import os

import pytest

from wss3d_toolkit.dataset import load_hidden_boxes
from wss3d_toolkit.factory import get_dataset
from wss3d_toolkit.inout import save_jsonl
from wss3d_toolkit.nds_eval import DetectionEvaluator, comparison_table, report_table
from wss3d_toolkit.pipeline import run_paths, stage_generate_data


@pytest.fixture
def data_root(tiny_config):
    stage_generate_data(tiny_config)
    return run_paths(tiny_config)['data']


def test_weak_split_scored_against_hidden_boxes(data_root, tmp_path):
    store = load_hidden_boxes(data_root)
    evaluator = DetectionEvaluator(data_root, 'weak')
    perfect = {sid: store.boxes(sid) for sid in evaluator.scene_ids}
    report = evaluator.evaluate_predictions(perfect, str(tmp_path), 'oracle')
    assert report.map == pytest.approx(1.0)
    assert report.spnds == pytest.approx(1.0)
    assert os.path.isfile(str(tmp_path / 'nds_eval_weak_oracle.json'))

    empty = evaluator.evaluate_predictions({})
    assert empty.map == 0.0
    assert empty.num_gt == report.num_gt


def test_result_file(data_root, tmp_path):
    evaluator = DetectionEvaluator(data_root, 'val', bins=None)
    scenes = list(get_dataset(data_root, 'val'))
    res = str(tmp_path / 'val_results.jsonl')
    save_jsonl(res, [{'scene_id': s.scene_id,
                      'boxes': [b.to_record(with_score=True) for b in s.boxes]}
                     for s in scenes])
    report = evaluator.evaluate(res)
    assert report.map == pytest.approx(1.0)
    assert report.bins == []
    assert os.path.isfile(str(tmp_path / 'nds_eval_val_val_results.json'))

    save_jsonl(res, [{'scene_id': 'nowhere', 'boxes': []}])
    with pytest.raises(ValueError):
        evaluator.evaluate(res)


def test_tables(data_root):
    evaluator = DetectionEvaluator(data_root, 'test')
    scenes = list(get_dataset(data_root, 'test'))
    report = evaluator.evaluate_predictions({s.scene_id: s.boxes for s in scenes})
    table = report_table(report)
    assert 'SPNDS' in table and 'AP@0.5m' in table and '[40, inf)' in table
    cmp = comparison_table({'a': report, 'b': report})
    assert cmp.count('\n') == 3
