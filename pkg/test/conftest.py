import numpy as np
import pytest

from wss3d_toolkit.config import from_dict
from wss3d_toolkit.scene_sim import SceneConfig
from wss3d_toolkit.structures import CameraCalib

SMALL_BEV = {'x_range': [-12.0, 12.0], 'y_range': [-12.0, 12.0], 'resolution': 1.0}

SMALL_SCENE = {
    'num_objects': 3,
    'min_range': 4.0,
    'max_range': 10.0,
    'min_separation': 3.0,
    'num_cameras': 2,
    'image_width': 32,
    'image_height': 16,
    'base_density': 4000.0,
    'num_background_points': 20,
}

TINY_EXPERIMENT = {
    'dataset': {
        'seed': 0,
        'num_train_scenes': 6,
        'num_val_scenes': 2,
        'num_test_scenes': 2,
        'split_ratio': 0.5,
        'scene': SMALL_SCENE,
    },
    'teacher': {
        'embed_dim': 8,
        'heads': 2,
        'levels': 2,
        'grid_side': 2,
        'bev': SMALL_BEV,
        'steps': 2,
        'batch_size': 2,
    },
    'student': {
        'bev': SMALL_BEV,
        'channels': 8,
        'trunk_layers': 1,
        'head_channels': 8,
        'steps': 2,
        'batch_size': 2,
    },
    'verbose': False,
}


@pytest.fixture
def small_scene_config():
    return SceneConfig(**SMALL_SCENE)


@pytest.fixture
def tiny_config(tmp_path):
    return from_dict(dict(TINY_EXPERIMENT, output_dir=str(tmp_path / 'run')))


@pytest.fixture
def pinhole():
    """f = 100, principal point (50, 50), identity extrinsics."""
    K = np.array([[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]])
    return CameraCalib(K=K, R=np.eye(3), t=np.zeros(3), width=100, height=100)
