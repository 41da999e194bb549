import numpy as np
import pytest

from anyface_lab.encoders import contrastive_pretrain
from anyface_lab.trainer import TrainConfig, Trainer
from anyface_lab.world import World

TRAIN_IDS = range(0, 800)
EVAL_IDS = range(1000, 1256)


@pytest.fixture(scope="session")
def world():
    return World()


@pytest.fixture(scope="session")
def samples(world):
    return [world.sample_paired(i) for i in TRAIN_IDS]


@pytest.fixture(scope="session")
def eval_samples(world):
    return [world.sample_paired(i) for i in EVAL_IDS]


@pytest.fixture(scope="session")
def encoders(world, samples):
    return contrastive_pretrain(world, samples)


@pytest.fixture(scope="session")
def trained(world, encoders, samples):
    """A default-config run of 2000 steps, shared by the post-training checks."""
    return Trainer(TrainConfig(steps=2000), world, encoders, samples).train()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
