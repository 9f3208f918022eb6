import sys
import time

import numpy as np
import pytest

from datxai import imaging, phantomgen, smallnet
from datxai.pipeline import prepare_images

# full-size phantom experiment shared by the training and localization checks
FULL_SEED = 0
FULL_SIZE = 64
FULL_EPOCHS = 10

# wall-clock seconds spent building each session fixture
FULL_TIMINGS: dict[str, float] = {}


def _timed(name, fn):
    t0 = time.perf_counter()
    out = fn()
    FULL_TIMINGS[name] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def full_dataset():
    return _timed("dataset", lambda: phantomgen.generate_dataset(430, 212, master_seed=FULL_SEED))


@pytest.fixture(scope="session")
def full_images(full_dataset):
    return _timed("images", lambda: prepare_images(full_dataset, size=FULL_SIZE))


@pytest.fixture(scope="session")
def full_split(full_dataset):
    return imaging.split_dataset(full_dataset, (0.8, 0.1, 0.1), seed=FULL_SEED)


@pytest.fixture(scope="session")
def trained_model(full_images, full_split):
    images, _ = full_images
    net = smallnet.compact_net(FULL_SIZE, seed=FULL_SEED)
    cfg = smallnet.OptimizerConfig(epochs=FULL_EPOCHS)
    model, _ = _timed("train", lambda: smallnet.train(net, full_split, images,
                                                      imaging.AugmentSpec(rng_seed=FULL_SEED), cfg,
                                                      seed=FULL_SEED))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
