import numpy as np
import pytest

from shortv import ModelConfig, ToySpec, build_toy, gen_calibration, monotone_profile


def random_weights(config, seed, scale=1.0):
    return build_toy(ToySpec(config, seed, (scale,) * config.num_layers))


def random_hidden(rng, n, h):
    return rng.standard_normal((n, h)).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(num_layers=4, hidden_size=8, intermediate_size=16, num_heads=2, vocab_size=11)


@pytest.fixture(scope="session")
def small_spec(small_config):
    return ToySpec(small_config, seed=7, profile=(1.0, 0.8, 0.6, 0.4))


@pytest.fixture(scope="session")
def small_weights(small_spec):
    return build_toy(small_spec)


@pytest.fixture(scope="session")
def small_calib(small_spec):
    return gen_calibration(small_spec, 5, (2, 4), (1, 4), seed=3)


@pytest.fixture(scope="session")
def structured_spec():
    cfg = ModelConfig(12, 32, 64, 4, 64)
    return ToySpec(cfg, 0, monotone_profile(12, increasing=True))
