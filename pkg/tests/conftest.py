"""Shared fixtures: toy-sized configs, models, and synthetic batches."""

import numpy as np
import pytest

from uem.matching import TrainingConfig
from uem.model import ModelConfig, init_model

from toys import TOY_DIM


@pytest.fixture
def toy_config():
    return ModelConfig(text_dim=TOY_DIM, video_dim=TOY_DIM, dim=TOY_DIM, proj_dim=TOY_DIM,
                       heads=4, text_layers=1, video_layers=1, max_len=32, epsilon=0.9)


@pytest.fixture
def toy_model(toy_config):
    return init_model(toy_config, seed=0)


@pytest.fixture
def train_config():
    return TrainingConfig(batch_size=4, epochs=2, learning_rate=1e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
