"""
Shared fixtures: a tiny 64-bit model and a small corpus it can read.
"""

import numpy as np
import pytest

from twostream.data.data_generate import generate_dataset
from twostream.model.model_base import TwoStreamModel
from twostream.training.training_check import tiny_generator_config, tiny_model_config


@pytest.fixture
def tiny_config():
    """Room for multiple-choice inputs, which concatenate question, answer and rationale."""
    return tiny_model_config(max_text_len=32)


@pytest.fixture
def tiny_corpus(tiny_config):
    return tiny_generator_config(tiny_config, seed=0)


@pytest.fixture
def tiny_model(tiny_config):
    return TwoStreamModel.initialize(tiny_config, seed=0)


@pytest.fixture
def tiny_examples(tiny_corpus):
    return generate_dataset(tiny_corpus, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
