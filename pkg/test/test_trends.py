import math
import os
from pathlib import Path

import pytest

from wss3d_toolkit.config import derive, load_config
from wss3d_toolkit.trends import (fusion_ablation, paired_test,
                                  query_init_ablation, ratio_grid,
                                  reproduce_trends, ssl_ablation)

DEFAULT = Path(__file__).resolve().parent.parent / 'configs' / 'default.json'


def test_paired_test():
    res = paired_test([1.0, 2.0, 3.0], [0.0, 1.0, 1.5])
    assert res['mean_diff'] == pytest.approx(7.0 / 6.0)
    assert 0.0 < res['pvalue'] < 0.05
    assert res['statistic'] > 0

    less = paired_test([1.0, 2.0, 3.0], [0.0, 1.0, 1.5], alternative='less')
    assert less['pvalue'] > 0.95

    constant = paired_test([1.0, 2.0], [0.5, 1.5])
    assert constant['mean_diff'] == pytest.approx(0.5)
    assert constant['pvalue'] is None

    single = paired_test([1.0], [0.0])
    assert single['statistic'] is None and single['pvalue'] is None


def test_unknown_trend(tiny_config):
    with pytest.raises(KeyError):
        reproduce_trends(tiny_config, which=('everything',))


@pytest.mark.slow
def test_ratio_grid(tiny_config, tmp_path):
    summary = ratio_grid(tiny_config, str(tmp_path), ratios=(0.5,), seeds=(0, 1))
    assert set(summary['runs']) == {'ours@0.5', 'baseline@0.5', 'full'}
    assert len(summary['runs']['ours@0.5']['spnds']) == 2
    assert set(summary['tests']['0.5']) == {'spnds', 'map', 'ours_wins_every_seed'}
    assert os.path.isfile(str(tmp_path / 'grid.json'))
    assert os.path.isfile(str(tmp_path / 'grid' / 'plots' / 'range_spnds.png'))
    assert os.path.isfile(
        str(tmp_path / 'grid' / 'ratio_0.5' / 'seed_1' / 'report_baseline.json'))


@pytest.mark.slow
def test_ablations(tiny_config, tmp_path):
    qi = query_init_ablation(tiny_config, str(tmp_path), seeds=(0, 1))
    assert len(qi['val_map']['implicit']) == 2
    assert set(qi['mate_test']) >= {'pvalue', 'mean_diff'}

    fusion = fusion_ablation(tiny_config, str(tmp_path), seeds=(0, 1))
    assert set(fusion['far_map']) == {'fused', 'lidar_only'}

    ssl = ssl_ablation(tiny_config, str(tmp_path), seeds=(0, 1))
    assert set(ssl['map']) == {'masked', 'unmasked', 'none'}
    for name in ('query_init', 'fusion', 'ssl'):
        assert os.path.isfile(str(tmp_path / (name + '.json')))


@pytest.mark.slow
def test_reproduce_trends_writes_under_output_dir(tiny_config):
    config = derive(tiny_config, overrides=['dataset.num_train_scenes=4'])
    summaries = reproduce_trends(config, which=('ssl',), seeds=(0,))
    assert set(summaries) == {'ssl'}
    assert os.path.isfile(os.path.join(config.output_dir, 'ssl.json'))


@pytest.mark.slow
def test_reproduce_trends_is_deterministic(tiny_config, tmp_path):
    outs = []
    for name in ('a', 'b'):
        config = derive(tiny_config, output_dir=str(tmp_path / name))
        reproduce_trends(config, which=('ssl',), seeds=(0, 1))
        outs.append(tmp_path / name)
    files = ['ssl.json'] + ['ssl/seed_{}/report_{}.json'.format(s, m)
                            for s in (0, 1) for m in ('masked', 'unmasked', 'none')]
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()


# Directional checks at the default scale: 200 scenes, 10% labeled, 3 seeds.

def _default(tmp_path):
    return load_config(str(DEFAULT), out=str(tmp_path / 'trend'),
                       overrides=['verbose=false'])


@pytest.mark.slow
def test_explicit_queries_beat_implicit(tmp_path):
    config = _default(tmp_path)
    summary = query_init_ablation(config, config.output_dir)
    assert summary['map_test']['mean_diff'] > 0
    assert summary['map_test']['pvalue'] < 0.05
    mate = summary['pseudo_mate']
    assert sum(mate['explicit']) / len(mate['explicit']) < \
        sum(mate['implicit']) / len(mate['implicit'])


@pytest.mark.slow
def test_images_help_far_range(tmp_path):
    config = _default(tmp_path)
    summary = fusion_ablation(config, config.output_dir)
    assert summary['far_improves_every_seed']
    far = summary['far_relative_change']
    far = math.inf if far is None else far
    near = summary['near_relative_change'] or 0.0
    assert abs(near) < abs(far)


@pytest.mark.slow
def test_pseudo_labels_beat_labeled_only(tmp_path):
    config = _default(tmp_path)
    summary = ratio_grid(config, config.output_dir, ratios=(0.10,),
                         include_full=False)
    assert summary['tests']['0.1']['ours_wins_every_seed']


@pytest.mark.slow
def test_masked_consistency_helps(tmp_path):
    config = _default(tmp_path)
    summary = ssl_ablation(config, config.output_dir)
    mean = {k: sum(v) / len(v) for k, v in summary['map'].items()}
    assert mean['masked'] >= mean['none']
    assert mean['masked'] >= mean['unmasked']
