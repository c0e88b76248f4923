import logging
import os

import numpy as np
import pytest
import torch
from hypothesis import settings
from hypothesis import strategies as strat

from src.config_schema import EvalConfig, LossWeights, PacConfig, SyntheticSpec, TrainConfig
from src.pac import PacModel, freeze
from src.synthetic import generate_synthetic_dataset

settings.register_profile('fast', max_examples=25, deadline=None)
settings.register_profile('default', max_examples=100, deadline=None)
settings.load_profile(os.getenv('HYPOTHESIS_PROFILE', 'fast'))


@strat.composite
def feature_sets(draw, min_rows=3, max_rows=12, max_dim=4):
    """Pair of (N, D) float arrays sharing D"""
    dim = draw(strat.integers(min_value=1, max_value=max_dim))
    rows_a = draw(strat.integers(min_value=min_rows, max_value=max_rows))
    rows_b = draw(strat.integers(min_value=min_rows, max_value=max_rows))
    seed = draw(strat.integers(min_value=0, max_value=2 ** 16))
    rng = np.random.default_rng(seed)
    scale = draw(strat.floats(min_value=0.1, max_value=5.0))
    return rng.normal(size=(rows_a, dim)) * scale, rng.normal(size=(rows_b, dim)) * scale + 0.5


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(resolution=16, num_samples=48, seed=0)


@pytest.fixture
def tiny_records(tiny_spec):
    return generate_synthetic_dataset(tiny_spec)


@pytest.fixture
def tiny_pac_config():
    return PacConfig(resolution=16, base_channels=4, batch_size=16, epochs=1, val_fraction=0.25)


@pytest.fixture
def tiny_pac():
    """Randomly initialised PAC flagged as trained, frozen"""
    torch.manual_seed(0)
    pac = PacModel(resolution=16, base_channels=4)
    pac.trained = True
    return freeze(pac)


@pytest.fixture
def tiny_train_config(tmp_path):
    return TrainConfig(
        resolution=16,
        batch_size=8,
        epochs=2,
        critic_steps_per_gen=1,
        gen_base_channels=4,
        num_res_blocks=2,
        disc_base_channels=4,
        disc_layers=4,
        tac_hidden=8,
        eval_batch=8,
        checkpoint_dir=str(tmp_path / 'checkpoints'),
        run_id='tiny',
        weights=LossWeights(),
    )


@pytest.fixture
def tiny_eval_config():
    return EvalConfig(kid_subsets=5, kid_subset_size=16, batch_size=16, seed=0)


@pytest.fixture
def restore_root_logger():
    """Undo configure_logging after a test"""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def central_difference():
    """Numerical gradient of a scalar function of a small float64 parameter tensor"""
    def gradient(fn, theta, eps=1e-6):
        theta = theta.detach()
        grads = torch.zeros_like(theta)
        for i in range(theta.numel()):
            step = torch.zeros_like(theta)
            step.view(-1)[i] = eps
            grads.view(-1)[i] = (float(fn(theta + step)) - float(fn(theta - step))) / (2 * eps)
        return grads
    return gradient
