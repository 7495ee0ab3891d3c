import numpy as np
import pytest

from building_sim import SimulatorConfig, generate_dataset
from model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_past=8, n_future=4, rnn_units=4, mha_heads=2, d_model=8, dropout_rate=0.0, rng_seed=7)


@pytest.fixture(scope="session")
def short_dataset():
    return generate_dataset(SimulatorConfig(days=4), seed=11)
