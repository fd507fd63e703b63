import numpy as np
import pytest

from advdip import classifier as C


@pytest.fixture(scope="session")
def shapes_small():
    """A small shapes split for unit tests (the acceptance suite uses the full one)."""
    return C.shapes_split(train=2000, test=200, seed=11)


@pytest.fixture(scope="session")
def small_model(shapes_small):
    train, _ = shapes_small
    model, history = C.train_classifier(train, epochs=8, batch=32, seed=0)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
