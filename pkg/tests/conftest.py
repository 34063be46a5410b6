"""
Shared fixtures: small model configs and tiny synthetic scenes
"""

import numpy as np
import pytest

from lib.backbone import BackboneConfig
from lib.synthdata import SceneSpec, gen_sequence
from lib.tracker import TrackerConfig
from lib.training import build_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_backbone():
    return BackboneConfig(embed_dim=16, heads=2, blocks=4, mlp_ratio=2, injection_layers=[1, 3])


@pytest.fixture
def small_tracker_config(small_backbone):
    return TrackerConfig(bands=8, endmembers=4, encoder_hidden=(8, 8), head_channels=8, head_depth=2,
                         backbone=small_backbone, seed=3)


@pytest.fixture
def small_scene():
    return SceneSpec(bands=8, height=48, width=48, frames=6, endmembers=3, target_size_min=10, target_size_max=14,
                     snr_db=40.0, seed=11)


@pytest.fixture
def small_sequence(small_scene):
    return gen_sequence(small_scene)


@pytest.fixture
def tiny_train_values():
    """Flat key=value settings for a model small enough to train a few steps in a test"""
    return {
        "bands": "8", "r": "4", "encoder_hidden": "8,8", "head_channels": "8", "head_depth": "2",
        "embed_dim": "16", "heads": "2", "blocks": "4", "injection_layers": "1,3",
        "batch_size": "2", "pairs_per_epoch": "4", "epochs": "1", "warmup_steps": "1", "lr": "1e-3",
    }


@pytest.fixture
def tiny_train_config(tiny_train_values):
    return build_config(tiny_train_values)
