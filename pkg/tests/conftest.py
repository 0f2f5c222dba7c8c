import numpy as np
import pytest
import torch

from critic_seg.model import ModelSpec

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def toy_spec():
    """Small graph exercising the same builder code path as the 64x64 model."""
    return ModelSpec(input_size=8, encoder_channels=(6, 8, 12), critic_hidden=(12, 12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=64):
    return rng.uniform(0.0, 1.0, size=(size, size, 3))


def random_mask(rng, size=64):
    return rng.uniform(0.0, 1.0, size=(size, size))
