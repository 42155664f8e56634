import math

import numpy as np
import pytest

from wss3d_toolkit.metrics import (DEFAULT_BINS, MetricsReport, aggregate_bins,
                                   average_precision, calc_ap,
                                   compute_tp_errors, evaluate_detections,
                                   match_detections, range_binned_eval, spnds,
                                   validate_bins)
from wss3d_toolkit.structures import Box3D


def _box(x, y, score=1.0, category=0, dims=(1.0, 1.0, 1.0), yaw=0.0):
    return Box3D(center=[x, y, 0.0], dims=dims, yaw=yaw, category=category,
                 score=score)


def _oracle_ap(preds, gts, threshold):
    """Greedy matching plus an explicit sweep over every score cutoff."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken, flags = set(), []
    for i in order:
        best, best_d = None, math.inf
        for j, g in enumerate(gts):
            if j in taken:
                continue
            d = math.hypot(preds[i].center[0] - g.center[0],
                           preds[i].center[1] - g.center[1])
            if d < best_d:
                best, best_d = j, d
        if best is not None and best_d < threshold:
            taken.add(best)
            flags.append(1)
        else:
            flags.append(0)
    if not any(flags):
        return 0.0
    rec, prec, tp = [], [], 0
    for k, f in enumerate(flags, 1):
        tp += f
        rec.append(tp / len(gts))
        prec.append(tp / k)

    def precision_at(r):
        if r > rec[-1]:
            return 0.0
        if r < rec[0]:
            return prec[0]
        j = max(i for i in range(len(rec)) if rec[i] <= r)
        if j == len(rec) - 1 or rec[j] == r:
            return prec[j]
        slope = (prec[j + 1] - prec[j]) / (rec[j + 1] - rec[j])
        return slope * (r - rec[j]) + prec[j]

    levels = np.linspace(0, 1, 101)[11:]
    clipped = [max(precision_at(r) - 0.1, 0.0) for r in levels]
    return sum(clipped) / len(clipped) / 0.9


def test_spnds_examples():
    assert spnds(1.0, 0.0, 0.0, 0.0) == 1.0
    assert spnds(0.0, 1.0, 1.0, 1.0) == 0.0
    assert spnds(0.8746, 0.3, 0.2, 0.4) == pytest.approx(0.809125, abs=1e-9)
    assert spnds(0.8746, 0.3, 0.2, 0.4) == pytest.approx(0.8091, abs=1e-4)
    for e in (1.0, 5.0, 100.0):
        assert spnds(0.5, e, e, e) == pytest.approx(2.5 / 8.0)


def test_spnds_monotone():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m, a, s, o = rng.uniform(0, 1), *rng.uniform(0, 2, 3)
        base = spnds(m, a, s, o)
        assert 0.0 <= base <= 1.0
        assert spnds(min(m + 0.1, 1.0), a, s, o) >= base
        assert spnds(m, a + 0.1, s, o) <= base


def test_match_examples():
    gt = [_box(0.0, 0.0)]
    tp, fp, fn = match_detections([_box(0.0, 0.0)], gt, 0, 2.0)
    assert (len(tp), len(fp), fn) == (1, 0, 0)

    hi, lo = _box(0.2, 0.0, score=0.9), _box(0.1, 0.0, score=0.5)
    tp, fp, fn = match_detections([lo, hi], gt, 0, 2.0)
    assert tp[0][0] is hi and fp == [lo] and fn == 0

    tp, fp, fn = match_detections([_box(2.5, 0.0)], gt, 0, 2.0)
    assert (len(tp), len(fp), fn) == (0, 1, 1)

    # Exactly at the threshold does not match.
    tp, _, _ = match_detections([_box(2.0, 0.0)], gt, 0, 2.0)
    assert tp == []

    with pytest.raises(ValueError):
        match_detections([], gt, 0, 0.0)


def test_match_order_invariant():
    rng = np.random.default_rng(1)
    gts = [_box(*rng.uniform(0, 5, 2)) for _ in range(4)]
    preds = [_box(*rng.uniform(0, 5, 2), score=s)
             for s in rng.permutation(np.linspace(0.1, 0.9, 8))]
    tp_a, _, _ = match_detections(preds, gts, 0, 1.5)
    tp_b, _, _ = match_detections(preds[::-1], gts[::-1], 0, 1.5)
    assert {(id(p), id(g)) for p, g in tp_a} == {(id(p), id(g)) for p, g in tp_b}


def test_ap_simple_cases():
    gts = [_box(0.0, 0.0), _box(10.0, 0.0)]
    assert average_precision(gts, gts, 0, 2.0) == pytest.approx(1.0)
    assert average_precision([], gts, 0, 2.0) == 0.0
    assert average_precision([], [], 0, 2.0) is None


def test_ap_matches_oracle():
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(1000):
        n_gt = int(rng.integers(1, 6))
        n_pred = int(rng.integers(0, 11))
        gts = [_box(*rng.uniform(0, 4, 2)) for _ in range(n_gt)]
        scores = rng.permutation(n_pred) / 10.0 + 0.05
        preds = [_box(*rng.uniform(0, 4, 2), score=s) for s in scores]
        th = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        assert average_precision(preds, gts, 0, th) == pytest.approx(
            _oracle_ap(preds, gts, th), abs=1e-12)
        checked += 1
    assert checked == 1000


def test_ap_ten_gts_five_hits():
    gts = [_box(5.0 * i, 0.0) for i in range(10)]
    hits = [_box(5.0 * i, 0.0, score=0.9 - 0.01 * i) for i in range(5)]
    fps = [_box(100.0 + i, 50.0, score=0.5 - 0.01 * i) for i in range(5)]
    preds = hits + fps
    assert average_precision(preds, gts, 0, 2.0) == pytest.approx(
        _oracle_ap(preds, gts, 2.0), abs=1e-12)


def test_tp_errors():
    g = _box(0.0, 0.0, dims=(1.0, 1.0, 1.0), yaw=0.3)
    assert compute_tp_errors([(g, g)]) == (0.0, 0.0, 0.0)

    big = _box(0.0, 0.0, dims=(2.0, 2.0, 2.0))
    small = _box(0.0, 0.0, dims=(1.0, 1.0, 1.0))
    assert compute_tp_errors([(big, small)])[1] == pytest.approx(0.875)

    a = _box(0.0, 0.0, yaw=math.pi)
    b = _box(0.0, 0.0, yaw=-math.pi)
    assert compute_tp_errors([(a, b)])[2] == pytest.approx(0.0)

    c = _box(3.0, 4.0, yaw=0.5)
    ate, _, aoe = compute_tp_errors([(c, _box(0.0, 0.0, yaw=-0.5))])
    assert ate == pytest.approx(5.0) and aoe == pytest.approx(1.0)

    assert compute_tp_errors([]) == (1.0, 1.0, 1.0)


def test_evaluate_detections_report():
    gts = [[_box(5.0, 0.0, category=0)], [_box(0.0, 8.0, category=1)]]
    preds = [[_box(5.0, 0.0, score=0.8, category=0)],
             [_box(0.0, 8.0, score=0.7, category=1)]]
    report = evaluate_detections(preds, gts, num_categories=3)
    assert report.map == pytest.approx(1.0)
    assert report.ap['cyclist'] == {'0.5': None, '1': None, '2': None, '4': None}
    assert report.num_gt == 2
    assert (report.mate, report.mase, report.maoe) == (0.0, 0.0, 0.0)
    assert report.spnds == pytest.approx(spnds(report.map, 0.0, 0.0, 0.0))

    # Matching never crosses scenes.
    crossed = evaluate_detections(preds[::-1], gts, num_categories=3)
    assert crossed.map == 0.0

    with pytest.raises(ValueError):
        evaluate_detections(preds[:1], gts, num_categories=3)


def test_range_bins():
    gts = [_box(5.0, 0.0), _box(0.0, 12.0, category=1)]
    preds = [_box(5.2, 0.0, score=0.9), _box(0.0, 12.5, score=0.6, category=1),
             _box(45.0, 0.0, score=0.3)]
    reports = range_binned_eval(preds, [g for g in gts], DEFAULT_BINS, 3)
    assert len(reports) == 4
    near = reports[0]
    assert near.range == (0.0, 20.0)
    assert near.num_gt == 2
    assert [r.num_gt for r in reports[1:]] == [0, 0, 0]
    assert reports[3].map == 0.0 and reports[3].is_empty
    agg = aggregate_bins(reports)
    assert agg['map'] == pytest.approx(near.map)

    # The unmatched far prediction does not count against the near bin.
    only_near = evaluate_detections(preds[:2], gts, 3)
    assert near.map == pytest.approx(only_near.map)


def test_prediction_follows_matched_gt_bin():
    gts = [_box(19.5, 0.0)]
    preds = [_box(20.5, 0.0, score=0.9)]
    reports = range_binned_eval(preds, gts, DEFAULT_BINS, 1)
    assert reports[0].ap['car']['2'] == pytest.approx(1.0)
    assert reports[1].num_gt == 0


def test_bins_validation():
    validate_bins(DEFAULT_BINS)
    with pytest.raises(ValueError):
        validate_bins([(0.0, 30.0), (20.0, math.inf)])
    with pytest.raises(ValueError):
        validate_bins([(0.0, 10.0), (20.0, math.inf)])
    with pytest.raises(ValueError):
        validate_bins([(0.0, 10.0), (10.0, 50.0)])


def test_report_json():
    gts = [_box(25.0, 0.0)]
    report = evaluate_detections(gts, gts, 1)
    report.bins = range_binned_eval(gts, gts, DEFAULT_BINS, 1)
    d = report.to_json()
    assert set(d) == {'ap', 'map', 'mate', 'mase', 'maoe', 'spnds', 'num_gt', 'bins'}
    assert d['bins'][3]['range'] == [40.0, None]
    back = MetricsReport.from_json(d)
    assert back.bins[3].range == (40.0, math.inf)
    assert back.bins[1].map == report.bins[1].map


def test_calc_ap_shifts_and_rescales_precision():
    assert calc_ap(np.ones(101)) == pytest.approx(1.0)
    assert calc_ap(np.full(101, 0.55)) == pytest.approx(0.5)
    assert calc_ap(np.full(101, 0.1)) == pytest.approx(0.0)
    assert calc_ap(np.full(101, 0.05)) == 0.0
    # Recall levels up to 0.1 do not count.
    prec = np.zeros(101)
    prec[:11] = 1.0
    assert calc_ap(prec) == 0.0
