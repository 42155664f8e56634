import math
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import SMALL_BEV
from wss3d_toolkit.config import load_config
from wss3d_toolkit.geometry import BEVSpec, cell_center
from wss3d_toolkit.layers.bev_encoder import BEVEncoder
from wss3d_toolkit.layers.center_head import build_targets, decode_detections
from wss3d_toolkit.metrics import evaluate_detections
from wss3d_toolkit.scene_sim import generate_scene, generate_split
from wss3d_toolkit.structures import Box3D
from wss3d_toolkit.student import (BEVFeatureMap, Detection, StudentModel,
                                   TrainSample, detections_from_maps,
                                   point_dropout, predict_points,
                                   ssl_consistency_loss, student_train_step)

SPEC = BEVSpec(**SMALL_BEV)


def _model():
    torch.manual_seed(0)
    return StudentModel(bev=SMALL_BEV, channels=8, trunk_layers=1,
                        head_channels=8)


def _samples(config, seeds, with_annotations):
    out = []
    for s in seeds:
        scene = generate_scene(config, s)
        anns = scene.annotations if with_annotations else []
        out.append(TrainSample(points=scene.points, boxes=scene.boxes,
                               annotations=anns))
    return out


def test_ssl_loss_contract():
    torch.manual_seed(0)
    f = torch.randn(4, 6, 6)
    mask = torch.rand(6, 6)
    assert float(ssl_consistency_loss(f, f.clone(), mask)) == 0.0

    g = torch.randn(4, 6, 6)
    assert float(ssl_consistency_loss(f, g, torch.zeros(6, 6))) == 0.0
    assert float(ssl_consistency_loss(f, g, 3.0 * mask)) == pytest.approx(
        float(ssl_consistency_loss(f, g, mask)), rel=1e-5)

    weak = torch.full((1, 5, 5), 3.0)
    strong = torch.full((1, 5, 5), 5.0)
    assert float(ssl_consistency_loss(weak, strong, mask[:5, :5])) == \
        pytest.approx(2.0)
    assert float(ssl_consistency_loss(weak, strong)) == pytest.approx(2.0)

    with pytest.raises(ValueError):
        ssl_consistency_loss(f, g[:2], mask)


def test_ssl_loss_stops_gradient_on_weak_branch():
    weak = torch.randn(3, 4, 4, requires_grad=True)
    strong = torch.randn(3, 4, 4, requires_grad=True)
    ssl_consistency_loss(weak, strong, np.ones((4, 4))).backward()
    assert weak.grad is None
    assert strong.grad is not None and strong.grad.abs().sum() > 0


def test_decode_empty_heatmap():
    heat = torch.zeros(3, SPEC.H, SPEC.W)
    reg = torch.zeros(8, SPEC.H, SPEC.W)
    assert decode_detections(heat, reg, SPEC) == []


def test_decode_single_peak():
    heat = torch.zeros(3, SPEC.H, SPEC.W)
    reg = torch.zeros(8, SPEC.H, SPEC.W)
    heat[1, 3, 5] = 0.9
    reg[7] = 1.0
    dets = detections_from_maps(heat, reg, SPEC)
    assert len(dets) == 1
    det = dets[0]
    assert isinstance(det, Detection)
    assert tuple(det.center[:2]) == cell_center(3, 5, SPEC)
    assert np.allclose(det.dims, 1.0)
    assert det.yaw == 0.0
    assert det.category == 1
    assert det.score == pytest.approx(0.9)


def test_decode_suppresses_weaker_neighbour():
    heat = torch.zeros(3, SPEC.H, SPEC.W)
    reg = torch.zeros(8, SPEC.H, SPEC.W)
    heat[0, 3, 5] = 0.9
    heat[0, 3, 6] = 0.7
    heat[0, 10, 10] = 0.5
    dets = decode_detections(heat, reg, SPEC)
    assert [round(d[4], 4) for d in dets] == [0.9, 0.5]
    assert decode_detections(heat, reg, SPEC, max_detections=1)[0][4] == \
        pytest.approx(0.9)


def test_encoder_empty_cloud():
    enc = BEVEncoder(SPEC, channels=4, num_layers=0)
    out = enc([np.zeros((0, 3))])
    assert out.shape == (1, 4, SPEC.H, SPEC.W)
    assert float(out.abs().sum()) == 0.0


def test_encoder_shift_moves_one_column():
    torch.manual_seed(1)
    enc = BEVEncoder(SPEC, channels=4, num_layers=0)
    pts = np.array([[-5.25, 0.5, -1.0], [0.5, 3.75, 0.25], [3.75, -7.5, 0.5],
                    [3.25, -7.75, -0.5]])
    shifted = pts + np.array([SPEC.resolution, 0.0, 0.0])
    with torch.no_grad():
        a = enc([pts])[0]
        b = enc([shifted])[0]
    assert torch.allclose(b[:, :, 1:], a[:, :, :-1], atol=1e-6)
    assert float(b[:, :, 0].abs().sum()) == 0.0


def test_feature_map_validation():
    with pytest.raises(ValueError):
        BEVFeatureMap(values=torch.zeros(SPEC.H, SPEC.W), spec=SPEC)
    with pytest.raises(ValueError):
        BEVFeatureMap(values=torch.zeros(2, SPEC.H, SPEC.W + 1), spec=SPEC)
    feat = _model().extract_bev_features(np.zeros((0, 3)))
    assert feat.values.shape == (8, SPEC.H, SPEC.W)


def test_build_targets_peak():
    box = Box3D([2.3, -4.6, -0.9], [1.9, 4.5, 1.6], 0.7, 2)
    t = build_targets([box], SPEC, 3)
    ci, ri = int(math.floor(2.3 + 12.0)), int(math.floor(-4.6 + 12.0))
    assert t['heatmap'][2, ri, ci] == 1.0
    assert t['heatmap'][2].max() == 1.0
    assert t['heatmap'][:2].max() == 0.0
    assert t['ind'].tolist() == [ri * SPEC.W + ci]
    assert t['reg'][0, 0] == pytest.approx(2.3 + 12.0 - ci - 0.5, abs=1e-6)
    assert t['reg'][0, 6] == pytest.approx(math.sin(0.7), abs=1e-6)

    outside = Box3D([40.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0)
    assert build_targets([outside], SPEC, 3)['ind'].size == 0


def test_point_dropout():
    rng = np.random.default_rng(0)
    pts = np.zeros((1000, 3))
    assert point_dropout(pts, rng, 0.0) is pts
    kept = point_dropout(pts, rng, 0.2)
    assert 700 < len(kept) < 900


def test_train_step_deterministic(small_scene_config):
    labeled = _samples(small_scene_config, [0], False)
    pseudo = _samples(small_scene_config, [1], True)
    runs = []
    for _ in range(2):
        model = _model()
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        runs.append(student_train_step(model, opt, labeled, pseudo,
                                       np.random.default_rng(7)))
    assert runs[0] == pytest.approx(runs[1])
    assert all(math.isfinite(v) for v in runs[0].values())
    assert runs[0]['loss_ssl'] >= 0.0


@pytest.mark.parametrize('kwargs', [{'ssl_weight': 0.0}, {'ssl_mode': 'none'}])
def test_train_step_without_consistency(small_scene_config, kwargs):
    model = _model()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    terms = student_train_step(model, opt, _samples(small_scene_config, [0], False),
                               _samples(small_scene_config, [1], True),
                               np.random.default_rng(0), **kwargs)
    assert terms['loss_ssl'] == 0.0
    assert terms['loss'] == pytest.approx(terms['loss_heatmap'] +
                                          terms['loss_reg'], rel=1e-5)


def test_train_step_labeled_only(small_scene_config):
    model = _model()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    terms = student_train_step(model, opt, _samples(small_scene_config, [0, 1],
                                                    False), [],
                               np.random.default_rng(0))
    assert terms['loss_ssl'] == 0.0
    assert terms['lambda'] == 1.0


def test_train_step_rejects_bad_inputs(small_scene_config):
    model = _model()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    batch = _samples(small_scene_config, [0], False)
    with pytest.raises(ValueError):
        student_train_step(model, opt, batch, [], np.random.default_rng(0),
                           ssl_mode='sometimes')
    with pytest.raises(ValueError):
        student_train_step(model, opt, [], [], np.random.default_rng(0))


def test_predict_points(small_scene_config):
    scene = generate_scene(small_scene_config, 0)
    dets = predict_points(_model(), scene.points, score_threshold=0.0,
                          max_detections=5)
    assert len(dets) <= 5
    assert all(0.0 <= d.score <= 1.0 for d in dets)
    assert [d.score for d in dets] == sorted((d.score for d in dets),
                                             reverse=True)


@pytest.mark.slow
def test_head_learns_on_labeled_scenes():
    config = load_config(str(Path(__file__).resolve().parent.parent / 'configs' /
                             'default.json'), overrides=['verbose=false'])
    sc, ds = config.student, config.dataset
    train = [TrainSample(points=s.points, boxes=s.boxes, annotations=[])
             for s in generate_split(ds.scene, ds.seed, 'train', 200)]
    test = generate_split(ds.scene, ds.seed, 'test', ds.num_test_scenes)

    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    model = StudentModel(**sc.model_kwargs(ds.scene.num_categories))
    optimizer = torch.optim.AdamW(model.parameters(), lr=sc.lr,
                                  weight_decay=sc.weight_decay)
    for _ in range(1500):
        idx = np.sort(rng.choice(len(train), size=sc.batch_size, replace=False))
        student_train_step(model, optimizer, [train[i] for i in idx], [], rng,
                           ssl_mode='none')

    preds = [predict_points(model, s.points, sc.score_threshold,
                            sc.max_detections) for s in test]
    report = evaluate_detections(preds, [s.boxes for s in test],
                                 ds.scene.num_categories, thresholds=(2.0,))
    assert report.map >= 0.5
