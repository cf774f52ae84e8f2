import hypothesis
import numpy as np
import pytest

from model import HadesModel, ModelConfig, PRESETS

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow directional experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_cfg():
    return PRESETS["desk-tiny"]


@pytest.fixture
def tiny_model(tiny_cfg):
    return HadesModel.initialize(tiny_cfg, seed=3)


@pytest.fixture
def one_layer_cfg():
    return ModelConfig(d=8, M=4, H=2, S=1, P=4, N=4, d_conv=2, n_layer=1, vocab=32)
