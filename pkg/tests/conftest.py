import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vqflow.data import SynthSpec, synth_dataset
from vqflow.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**overrides) -> ModelConfig:
    """Two-scale float64 model small enough for finite differences."""
    base = dict(in_channels=(4, 6), spatial=((4, 4), (2, 2)), n_blocks=2, d_cp=4, d_pe=2,
                k_cp=3, k_csp=5, cpc_hidden=5, head_hidden=5, dtype="float64", zero_init=False, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_features(n=2, seed=0, config=None):
    config = config or tiny_config()
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(n, h, w, d)).astype(config.dtype)
            for d, (h, w) in zip(config.in_channels, config.spatial)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_spec():
    return SynthSpec(n_classes=2, channels=(4, 8), spatial=((8, 8), (4, 4)), n_train=32, n_test=16,
                     patch_range=(2, 4))


@pytest.fixture(scope="session")
def toy_data(toy_spec):
    return synth_dataset(toy_spec, seed=3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
