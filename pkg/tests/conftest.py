import numpy as np
import pytest
from hypothesis import settings

from timeomni.model import ModelConfig, TimeOmni

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def small_config(**overrides) -> ModelConfig:
    base = dict(
        d_llm=16,
        n_layers=2,
        n_heads=2,
        d_enc=8,
        num_prototypes=8,
        reprog_heads=2,
        expert_max_exponent=6,
        head_lengths=(8, 16, 32, 64, 96, 128),
        max_new_tokens=6,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return TimeOmni.init(small_config(), seed=3)
