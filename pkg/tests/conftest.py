import numpy as np
import pytest

from discnn_detector.dataset import generate_synthetic_dataset
from discnn_detector.discnn_model import DisCNNModel, PARAM_SHAPES, CONV_CHANNELS, build_discnn
from discnn_detector.tensor_engine import RunningStats
from discnn_detector.n2o_trainer import N2OConfig, train
from discnn_detector.detector import calibrate_threshold

TRAIN_SEED = 7
TRAIN_EPOCHS = 30


def zero_discnn(dtype=np.float32) -> DisCNNModel:
    params = {_k: np.zeros(_s, dtype=dtype) for _k, _s in PARAM_SHAPES.items()}
    running = {f'bn{_i}': RunningStats(np.zeros(_c, dtype=dtype), np.ones(_c, dtype=dtype))
               for _i, _c in enumerate(CONV_CHANNELS, start=1)}
    return DisCNNModel(params, running)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def seeded_model():
    return build_discnn(3)


@pytest.fixture(scope='session')
def zero_model():
    return zero_discnn()


def _train_glyph_model(glyph: str, other: tuple, seed: int):
    samples = generate_synthetic_dataset(seed, 64, 128, glyph, other)
    model, history = train(build_discnn(seed), samples, N2OConfig(epochs=TRAIN_EPOCHS, seed=seed))
    validation = generate_synthetic_dataset(seed + 100, 32, 64, glyph, other)
    return model, history, calibrate_threshold(model, validation)


@pytest.fixture(scope='session')
def trained_wagon():
    """ (model, history, thr) of a wagon detector trained on the default synthetic set
    """
    return _train_glyph_model('wagon', (), TRAIN_SEED)


@pytest.fixture(scope='session')
def trained_pair():
    """ wagon and beacon detectors, each seeing the other glyph as a negative
    """
    return {'wagon': _train_glyph_model('wagon', ('beacon',), TRAIN_SEED),
            'beacon': _train_glyph_model('beacon', ('wagon',), TRAIN_SEED + 1)}
