import math
import os

import pytest

from wss3d_toolkit.inout import load_json
from wss3d_toolkit.metrics import DEFAULT_BINS, evaluate_detections, range_binned_eval
from wss3d_toolkit.plots import bin_label, chart_data, emit_plots, gain_data
from wss3d_toolkit.structures import Box3D


def _report(offset, bins=DEFAULT_BINS):
    gts = [Box3D([d, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0) for d in (5.0, 25.0, 35.0)]
    preds = [Box3D([g.center[0] + offset, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0,
                   score=0.5) for g in gts]
    report = evaluate_detections(preds, gts, 1)
    report.bins = range_binned_eval(preds, gts, bins, 1)
    return report


def test_bin_labels():
    assert bin_label((0.0, 20.0)) == '0-20m'
    assert bin_label((40.0, math.inf)) == '>40m'


def test_chart_data_mirrors_reports():
    reports = {'a': _report(0.0), 'b': _report(0.7)}
    data = chart_data(reports, 'map')
    assert data['bins'] == ['0-20m', '20-30m', '30-40m', '>40m']
    assert data['ranges'][-1] == [40.0, None]
    for name, report in reports.items():
        expected = [None if b.is_empty else b.map for b in report.bins]
        assert data['series'][name] == expected
    assert data['series']['a'][3] is None


def test_gain_data():
    data = {'metric': 'map', 'bins': ['x', 'y', 'z'],
            'series': {'base': [0.5, None, 0.0], 'ours': [0.75, 0.3, 0.2]}}
    gain = gain_data(data)
    assert gain['metric'] == 'gain_map'
    assert gain['baseline'] == 'base'
    assert gain['series'] == {'ours': [pytest.approx(0.5), None, None]}


def test_emit_single_run(tmp_path):
    images = emit_plots({'student': _report(0.0)}, str(tmp_path))
    assert set(images) == {'range_spnds', 'range_map'}
    for path in images.values():
        assert os.path.getsize(path) > 0
    data = load_json(str(tmp_path / 'range_map.json'))
    assert data['series']['student'][:3] == [pytest.approx(1.0)] * 3


def test_emit_comparison(tmp_path):
    images = emit_plots({'baseline': _report(1.5), 'ours': _report(0.0)},
                        str(tmp_path))
    assert set(images) == {'range_spnds', 'range_map', 'range_gain_spnds',
                           'range_gain_map'}
    gain = load_json(str(tmp_path / 'range_gain_map.json'))
    assert list(gain['series']) == ['ours']
    assert all(g is None or g > 0 for g in gain['series']['ours'])


def test_emit_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        emit_plots({}, str(tmp_path))
    bare = _report(0.0)
    bare.bins = []
    with pytest.raises(ValueError):
        emit_plots({'bare': bare}, str(tmp_path))
    other = _report(0.0, bins=[(0.0, 30.0), (30.0, math.inf)])
    with pytest.raises(ValueError):
        emit_plots({'a': _report(0.0), 'b': other}, str(tmp_path))
