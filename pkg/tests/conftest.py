import numpy as np
import pytest

from vivalab.instructor import InstructorConfig
from vivalab.model import ModelConfig
from vivalab.numerics import Rng
from vivalab.synthworld.pairs import WorldConfig


@pytest.fixture(scope="session")
def tiny_world() -> WorldConfig:
    return WorldConfig(frames=4, height=16, width=16, min_size=5, max_size=7,
                       max_entities=2)


@pytest.fixture(scope="session")
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(patch=(1, 4, 4), d_model=32, n_layers=2, n_heads=4,
                       d_ff=48, d_time=16, d_patch=24)


@pytest.fixture(scope="session")
def tiny_instructor_cfg() -> InstructorConfig:
    return InstructorConfig(d_enc=16, d_model=32, image_patch=8)


@pytest.fixture()
def rng() -> Rng:
    return Rng(1234)


def make_tiny_net(tiny_model_cfg, dims=(4, 16, 16, 3), dtype=np.float64,
                  seed=5, random_init=True):
    from vivalab.model import VelocityNet
    return VelocityNet(tiny_model_cfg, dims, Rng(seed), dtype=dtype,
                       zero_init_head=not random_init,
                       zero_init_mod=not random_init)
