import numpy as np
import pytest

from splitfield import scene
from splitfield.nerf import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def small_model_cfg():
    return ModelConfig(width=8, cut_dim=4, geo_feat=3, color_width=8, color_layers=3, pos_freqs=2, dir_freqs=1)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Eight oracle-rendered 16x16 views of the default scene."""
    return scene.make_dataset(scene.default_scene(), scene.pose_ring(8), 16, 16)
