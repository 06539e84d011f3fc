import pytest
import torch

from vista import backbone, phantom
from vista.config import ModelConfig

torch.set_num_threads(1)

TINY = ModelConfig(base_channels=4, depth=2, seed=0)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def small_cohort():
    return phantom.make_cohort(4, phantom.PhantomSpec(shape=(16, 16, 16), seed=7))


@pytest.fixture(scope="session")
def shifted_cohort():
    return phantom.make_cohort(3, phantom.PhantomSpec(shape=(16, 16, 16), seed=8), shift=phantom.DEFAULT_TARGET_SHIFT)


@pytest.fixture(scope="session")
def tiny_training(small_cohort):
    """A briefly trained tiny model and its loss history."""
    model = backbone.build_model(TINY)
    return backbone.pretrain_source(model, [(c.volume, c.labels) for c in small_cohort], epochs=20, lr=1e-2)


@pytest.fixture(scope="session")
def trained_tiny(tiny_training):
    return tiny_training[0]
