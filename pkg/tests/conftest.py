import numpy as np
import pytest

from stucknet.data import ImageSet
from stucknet import mlp
from stucknet.mlp import TrainConfig


def make_synthetic(n: int, seed: int, n_classes: int = 10) -> ImageSet:
    """Separable toy data: noisy class prototypes in [0, 1], 784 pixels."""
    rng = np.random.default_rng(seed)
    prototypes = np.random.default_rng(1234).uniform(0, 1, size=(n_classes, 784))
    labels = rng.integers(0, n_classes, size=n)
    noise = rng.normal(0, 0.3, size=(n, 784))
    images = np.clip(prototypes[labels] + noise, 0.0, 1.0)
    return ImageSet(images=images, labels=labels)


@pytest.fixture(scope="session")
def synth_train():
    return make_synthetic(1500, seed=7)


@pytest.fixture(scope="session")
def synth_test():
    return make_synthetic(500, seed=8)


@pytest.fixture(scope="session")
def synth_cfg():
    return TrainConfig(epochs=3, batch=64, seed=11)


@pytest.fixture(scope="session")
def synth_model(synth_train, synth_cfg):
    return mlp.train(synth_train, synth_cfg)
